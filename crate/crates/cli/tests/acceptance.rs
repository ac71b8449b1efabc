//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nested_eig::commands;
use nested_eig::config::{ConsistencySettings, OptimizeSettings, SweepSettings};
use nested_eig::RunConfig;
use nuisance_eig::allocation::{self, PilotConstants};
use nuisance_eig::estimators::{self, ProposalKind};
use nuisance_eig::laplace::Posterior;
use nuisance_eig::linalg::{self, frobenius_rel};
use nuisance_eig::models::{example1_eig, BuiltinModel, PriorReading, SyntheticDiscretized};
use nuisance_eig::{EstimatorKind, ExperimentModel, PriorSpec, SolverConfig, Substreams};
use rand::Rng;

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn example1_config(xi: f64) -> RunConfig {
    let mut cfg = RunConfig::new(BuiltinModel::Example1 { nuisance: true });
    cfg.design = Some(vec![xi]);
    cfg
}

fn oracle_convergence() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, xi) in [0.25, 0.5, 1.0].into_iter().enumerate() {
        let mut cfg = example1_config(xi);
        cfg.seed = 100 + k as u64;
        cfg.consistency = Some(ConsistencySettings {
            tols: vec![0.1],
            runs: 100,
        });
        match commands::consistency(&cfg) {
            Ok(r) => {
                let hits = 100 - r.rows[0].exceedances;
                pass &= hits >= 95;
                parts.push(format!(
                    "xi={xi}: {hits}/100 within 0.1 of {:.5}",
                    r.reference
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("xi={xi}: {e}"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn mc2la_unbiased() -> Outcome {
    let (m, p) = BuiltinModel::Example1 { nuisance: true }.build().unwrap();
    let n = 10_000;
    let r = estimators::mc2la(
        &m,
        &p,
        &[0.5],
        n,
        &Substreams::new(7),
        &SolverConfig::default(),
    )
    .unwrap();
    let exact = example1_eig(0.5);
    let bound = 3.0 * (r.sample_variance_outer / n as f64).sqrt();
    let err = (r.estimate - exact).abs();
    outcome(
        err <= bound,
        format!(
            "estimate {:.5} vs {exact:.5}, |error| {err:.2e} <= {bound:.2e}",
            r.estimate
        ),
    )
}

fn allocation_exactness() -> Outcome {
    let mut fails = Vec::new();
    let c = PilotConstants::new(1.0, 1.0, 1.0).unwrap();
    let a = allocation::allocate(&c, 1.0, 0.05).unwrap();
    if !((a.kappa - 0.75).abs() < 1e-12 && a.m1_inner == 8 && a.m2_inner == 8 && a.n_outer == 11) {
        fails.push(format!("hand point gave {a:?}"));
    }
    let d3 = 2.0;
    let small = allocation::kappa_star(d3, 1e-6 * d3);
    let large = allocation::kappa_star(d3, 1e6 * d3);
    if (small - 2.0 / 3.0).abs() > 1e-3 || (large - 1.0).abs() > 1e-3 {
        fails.push(format!("kappa limits {small}, {large}"));
    }
    let mut rng = Substreams::new(11).stream("allocation-draws", 0);
    let mut bad = 0;
    let mut max_dev = 0.0f64;
    for _ in 0..10_000 {
        let mut draw = || 10f64.powf(rng.random_range(-4.0..3.0));
        let c = PilotConstants::new(draw(), draw(), draw()).unwrap();
        let tol = draw();
        match allocation::allocate(&c, tol, 0.05) {
            Ok(a) if allocation::verify_allocation(&c, &a, tol).ok => {}
            _ => bad += 1,
        }
        let disc = c.clone().with_discretization(1.0, 2.0, 1e-12).unwrap();
        if let (Ok(b), Ok(d)) = (
            allocation::allocate(&c, tol, 0.05),
            allocation::allocate_with_discretization(&disc, tol, 0.05),
        ) {
            for (x, y) in [
                (b.kappa, d.kappa),
                (b.n_real, d.n_real),
                (b.m1_real, d.m1_real),
                (b.m2_real, d.m2_real),
            ] {
                max_dev = max_dev.max((x - y).abs() / x.abs());
            }
        }
    }
    if bad > 0 {
        fails.push(format!(
            "{bad} of 10000 random allocations failed verification"
        ));
    }
    if max_dev > 1e-6 {
        fails.push(format!(
            "discretized solution differs by {max_dev:.1e} at gamma=1e-12"
        ));
    }
    let detail = if fails.is_empty() {
        format!(
            "kappa=0.75, M=8, N=11; kappa(1e-6 D3)={small:.6}, kappa(1e6 D3)={large:.6}; 10000/10000 verified; max deviation {max_dev:.1e}"
        )
    } else {
        fails.join("; ")
    };
    outcome(fails.is_empty(), detail)
}

fn importance_collapse() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for xi in [0.25, 0.5, 1.0] {
        let mut cfg = example1_config(xi);
        cfg.pilot.proposal = Some(ProposalKind::Laplace);
        let c = commands::pilot(&cfg).unwrap().constants;
        let a = commands::allocate(&c, 1e-2, 0.05, EstimatorKind::Dlmc2is).unwrap();
        let ok = c.c1 < 1e-6 && c.c2 < 1e-6 && a.m1_inner == 1 && a.m2_inner == 1;
        pass &= ok;
        parts.push(format!(
            "xi={xi}: C1={:.1e}, C2={:.1e}, M1={}, M2={}",
            c.c1, c.c2, a.m1_inner, a.m2_inner
        ));
    }
    outcome(pass, parts.join("; "))
}

fn consistency_experiment() -> Outcome {
    let mut cfg = example1_config(0.5);
    cfg.seed = 5;
    cfg.consistency = Some(ConsistencySettings {
        tols: vec![0.5, 0.25, 0.1],
        runs: 100,
    });
    let r = match commands::consistency(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let counts: Vec<usize> = r.rows.iter().map(|row| row.exceedances).collect();
    let pass = counts.iter().all(|&c| c <= 11);
    cfg.estimator = EstimatorKind::Mc2la;
    let mc2la = commands::consistency(&cfg)
        .map(|r| {
            format!(
                "{:?}",
                r.rows.iter().map(|row| row.exceedances).collect::<Vec<_>>()
            )
        })
        .unwrap_or_else(|e| e.to_string());
    outcome(
        pass,
        format!("DLMC2IS exceedances at TOL 0.5/0.25/0.1: {counts:?} (bound 11); MC2LA, reported only: {mc2la}"),
    )
}

fn pk_config(design: Option<Vec<f64>>) -> RunConfig {
    let mut cfg = RunConfig::new(BuiltinModel::Pk {
        prior_reading: PriorReading::Variance,
    });
    cfg.tol = 1e-2;
    cfg.pilot.n_outer = 100;
    cfg.pilot.m_inner = 10;
    cfg.design = design;
    cfg
}

fn pharmacokinetics() -> Outcome {
    let geometric = match commands::estimate(&pk_config(None), None) {
        Ok(r) => r.result.estimate,
        Err(e) => return outcome(false, format!("geometric design: {e}")),
    };
    let mut cfg = pk_config(None);
    cfg.optimize = Some(OptimizeSettings {
        max_sweeps: 10,
        ..OptimizeSettings::default()
    });
    let best = match commands::optimize(&cfg) {
        Ok(o) => o.xi,
        Err(e) => return outcome(false, format!("optimizer: {e}")),
    };
    let optimized = match commands::estimate(&pk_config(Some(best.clone())), None) {
        Ok(r) => r.result.estimate,
        Err(e) => return outcome(false, format!("optimized design: {e}")),
    };
    let in_band = (geometric - 6.12).abs() <= 0.15;
    let gain = optimized - geometric;
    let design: Vec<String> = best.iter().map(|x| format!("{x:.2}")).collect();
    outcome(
        in_band && gain >= 0.05,
        format!(
            "variance reading: geometric EIG {geometric:.4} (target 6.12 +/- 0.15), optimized EIG {optimized:.4} (gain {gain:.3}) at [{}]",
            design.join(", ")
        ),
    )
}

fn discretization_allocation() -> Outcome {
    let (b, eta, gamma) = (0.5, 2.0, 1.0);
    let family = SyntheticDiscretized::new(b, eta, gamma).unwrap();
    let cfg = SolverConfig::default();
    let fit = allocation::estimate_c3_pilot(
        |h| family.at(h),
        &[0.5],
        &[0.4, 0.2, 0.1, 0.05],
        0.0,
        EstimatorKind::Mc2la,
        4000,
        1,
        &cfg,
        &Substreams::new(21),
    )
    .unwrap();
    let eta_ok = (1.9..=2.1).contains(&fit.eta);

    // Mesh size from exact constants against the unrationalized formula.
    let exact = PilotConstants::new(0.2, 0.5, 1.0)
        .unwrap()
        .with_discretization(b, eta, gamma)
        .unwrap();
    let tol = 0.1;
    let a = allocation::allocate_with_discretization(&exact, tol, 0.05).unwrap();
    let d3 = exact.d3;
    let kappa = eta
        * (8.0 * tol * eta + 3.0 * d3 * eta + d3 * gamma + 4.0 * tol * gamma
            - (d3
                * (9.0 * d3 * eta * eta
                    + 6.0 * d3 * eta * gamma
                    + d3 * gamma * gamma
                    + 16.0 * eta * eta * tol
                    + 8.0 * tol * eta * gamma))
                .sqrt())
        / (2.0 * tol * (4.0 * eta * eta + 4.0 * eta * gamma + gamma * gamma));
    let h_closed = (gamma * kappa * tol / (2.0 * eta * b)).powf(1.0 / eta);
    let h_dev = (a.h_mesh.unwrap() - h_closed).abs() / h_closed;
    let h_ok = h_dev <= 1e-12;

    // Work scaling with pilot constants from the base model.
    let (m0, p0) = family.at(0.0).unwrap();
    let base = allocation::estimate_constants_pilot(
        &m0,
        &p0,
        &[0.5],
        200,
        30,
        30,
        ProposalKind::Prior,
        &cfg,
        &Substreams::new(22),
    )
    .unwrap();
    let constants = base.with_discretization(fit.c3, fit.eta, gamma).unwrap();
    let tols = [0.2, 0.1, 0.05, 0.025];
    let works: Result<Vec<f64>, _> = tols
        .iter()
        .map(|&t| {
            allocation::allocate_with_discretization(&constants, t, 0.05).map(|a| a.predicted_work)
        })
        .collect();
    let (slope, work_ok) = match works {
        Ok(w) => {
            let xs: Vec<f64> = tols.iter().map(|t| t.ln()).collect();
            let ys: Vec<f64> = w.iter().map(|v| v.ln()).collect();
            let (s, _) = allocation::linear_fit(&xs, &ys);
            let target = -(3.0 + gamma / fit.eta);
            (s, (s / target - 1.0).abs() <= 0.1)
        }
        Err(_) => (f64::NAN, false),
    };
    outcome(
        eta_ok && h_ok && work_ok,
        format!(
            "eta_hat={:.3}, C3_hat={:.3} (planted 2, {b}); h* relative deviation {h_dev:.1e}; work slope {slope:.3} vs {:.3}",
            fit.eta,
            fit.c3,
            -(3.0 + gamma / fit.eta)
        ),
    )
}

fn fd_matrix(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> nalgebra::DMatrix<f64> {
    let rows = f(x).len();
    let mut out = nalgebra::DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        let h = nuisance_eig::model::fd_step(x[j]);
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[j] += h;
        down[j] -= h;
        let (fu, fd) = (f(&up), f(&down));
        for i in 0..rows {
            out[(i, j)] = (fu[i] - fd[i]) / (up[j] - down[j]);
        }
    }
    out
}

struct Hygiene {
    worst_rel: f64,
    spd_failures: usize,
    fits: usize,
}

fn check_model(
    model: &ExperimentModel,
    prior: &PriorSpec,
    design: impl Fn(&mut nuisance_eig::rng::StreamRng) -> Vec<f64>,
    seed: u64,
) -> Hygiene {
    let mut rng = Substreams::new(seed).stream("hygiene", 0);
    let cfg = SolverConfig::default();
    let mut h = Hygiene {
        worst_rel: 0.0,
        spd_failures: 0,
        fits: 0,
    };
    let mut note = |rel: f64| h.worst_rel = h.worst_rel.max(rel);
    let mut spd = Vec::new();
    for _ in 0..100 {
        let xi = design(&mut rng);
        let (t, p) = prior.sample(&mut rng);
        let (t, p) = (t.as_slice(), p.as_slice());
        let g = |tt: &[f64], pp: &[f64]| model.eval(&xi, tt, pp).unwrap().as_slice().to_vec();
        note(frobenius_rel(
            &model.jac_theta(&xi, t, p).unwrap(),
            &fd_matrix(|x| g(x, p), t),
        ));
        if !p.is_empty() {
            note(frobenius_rel(
                &model.jac_phi(&xi, t, p).unwrap(),
                &fd_matrix(|x| g(t, x), p),
            ));
            if let Some(hess) = model.hess_phi(&xi, t, p) {
                let col = |x: &[f64]| model.jac_phi(&xi, t, x).unwrap().as_slice().to_vec();
                let fd = fd_matrix(col, p);
                let d_y = model.d_y();
                for (i, hi) in hess.iter().enumerate() {
                    let fd_i =
                        nalgebra::DMatrix::from_fn(p.len(), p.len(), |a, b| fd[(i + a * d_y, b)]);
                    note(frobenius_rel(hi, &fd_i));
                }
            }
        }
        let z: Vec<f64> = t.iter().chain(p).copied().collect();
        let split = |x: &[f64]| prior.log_joint(&x[..t.len()], &x[t.len()..]);
        let grad = prior.grad_log_joint(t, p);
        let fd_grad = fd_matrix(|x| vec![split(x)], &z);
        note(frobenius_rel(
            &nalgebra::DMatrix::from_row_slice(1, z.len(), grad.as_slice()),
            &fd_grad,
        ));
        let hess = prior.hess_log_joint(t, p);
        let fd_hess = fd_matrix(
            |x| {
                prior
                    .grad_log_joint(&x[..t.len()], &x[t.len()..])
                    .as_slice()
                    .to_vec()
            },
            &z,
        );
        note(frobenius_rel(&hess, &fd_hess));

        let data = model.sample_data(&xi, t, p, &mut rng).unwrap();
        let post = Posterior::new(model, prior, &data).unwrap();
        if !p.is_empty() {
            let grad = post.grad_f_phi(t, p).unwrap();
            let fd = fd_matrix(|x| vec![post.eval_f(t, x).unwrap()], p);
            note(frobenius_rel(
                &nalgebra::DMatrix::from_row_slice(1, p.len(), grad.as_slice()),
                &fd,
            ));
            spd.push(post.fit_nuisance_map(t, &cfg, None).map(|f| f.precision));
        }
        spd.push(post.fit_theta_map(&cfg, None).map(|f| f.precision));
        spd.push(post.fit_joint_map(&cfg, None).map(|f| f.precision));
    }
    for m in spd.into_iter().flatten() {
        h.fits += 1;
        if !(linalg::is_symmetric(&m, 1e-10) && m.clone().cholesky().is_some()) {
            h.spd_failures += 1;
        }
    }
    h
}

fn run_cli(args: &[&str], threads: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_nested-eig"))
        .args(args)
        .args(["--threads", threads])
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {status}"))
    }
}

fn thread_invariance(dir: &Path) -> Result<bool, String> {
    let mut cfg = example1_config(0.5);
    cfg.sweep = Some(SweepSettings {
        grid: (1..=10).map(|i| vec![i as f64 / 10.0]).collect(),
        n_outer: 500,
        m_inner: 1,
    });
    cfg.optimize = Some(OptimizeSettings {
        max_sweeps: 3,
        minibatch_n: 100,
        ..OptimizeSettings::default()
    });
    let config = dir.join("config.json");
    std::fs::write(&config, cfg.to_json()).map_err(|e| e.to_string())?;
    let config = config.to_str().unwrap();
    let mut same = true;
    for cmd in ["estimate", "sweep", "optimize"] {
        let mut outputs = Vec::new();
        for threads in ["1", "8"] {
            let out = dir.join(format!("{cmd}-{threads}.csv"));
            run_cli(
                &[
                    cmd,
                    "--config",
                    config,
                    "--seed",
                    "3",
                    "--out",
                    out.to_str().unwrap(),
                ],
                threads,
            )?;
            outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
        same &= outputs[0] == outputs[1];
    }
    Ok(same)
}

fn numerical_hygiene() -> Outcome {
    let mut worst = 0.0f64;
    let (mut spd_failures, mut fits) = (0, 0);
    let models: Vec<(BuiltinModel, bool)> = vec![
        (BuiltinModel::Example1 { nuisance: true }, true),
        (BuiltinModel::Example1 { nuisance: false }, true),
        (
            BuiltinModel::SyntheticDisc {
                b: 0.5,
                eta: 2.0,
                gamma: 1.0,
                h: 0.3,
            },
            true,
        ),
        (
            BuiltinModel::Pk {
                prior_reading: PriorReading::Variance,
            },
            false,
        ),
    ];
    for (k, (spec, unit_design)) in models.into_iter().enumerate() {
        let (m, p) = spec.build().unwrap();
        let default = spec.default_design();
        let h = check_model(
            &m,
            &p,
            |rng| {
                if unit_design {
                    vec![rng.random_range(0.01..1.0)]
                } else {
                    default.clone()
                }
            },
            30 + k as u64,
        );
        worst = worst.max(h.worst_rel);
        spd_failures += h.spd_failures;
        fits += h.fits;
    }
    let dir = tempfile::tempdir().unwrap();
    let threads = thread_invariance(dir.path());
    let same = matches!(threads, Ok(true));
    outcome(
        worst <= 1e-5 && spd_failures == 0 && fits > 0 && same,
        format!(
            "worst derivative mismatch {worst:.1e}; {}/{fits} precisions SPD; 1 vs 8 threads: {}",
            fits - spd_failures,
            match threads {
                Ok(true) => "byte-identical".to_string(),
                Ok(false) => "outputs differ".to_string(),
                Err(e) => e,
            }
        ),
    )
}

fn main() {
    let checks: [Check; 8] = [
        ("analytic oracle convergence", oracle_convergence),
        ("MC2LA unbiasedness", mc2la_unbiased),
        ("allocation exactness", allocation_exactness),
        ("importance sampling collapse", importance_collapse),
        ("consistency experiment", consistency_experiment),
        ("pharmacokinetics", pharmacokinetics),
        ("discretization-aware allocation", discretization_allocation),
        ("numerical hygiene", numerical_hygiene),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {}: {name}: {} [{:.1}s]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
