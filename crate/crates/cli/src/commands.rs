use nuisance_eig::allocation::{self, Allocation, PilotConstants};
use nuisance_eig::design::{self, DesignOutcome, SweepRow};
use nuisance_eig::estimators::{self, EigResult, ProposalKind};
use nuisance_eig::models::{BuiltinModel, SyntheticDiscretized};
use nuisance_eig::{EstimatorKind, Substreams};
use serde::{Deserialize, Serialize};

use crate::config::{ConsistencySettings, RunConfig};
use crate::CliError;

/// Pilot constants together with the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotFile {
    pub constants: PilotConstants,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub model: BuiltinModel,
    pub design: Vec<f64>,
    pub seed: u64,
    pub proposal: ProposalKind,
    pub n_outer: usize,
    pub m_inner: usize,
}

impl PilotFile {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let f: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("bad constants file: {e}")))?;
        f.constants.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("constants serialize")
    }
}

/// Estimates `C1`, `C2`, `D1`, `D2`, `D3`, the MC2LA variance and, when
/// configured, `C3` and `η`.
pub fn pilot(cfg: &RunConfig) -> Result<PilotFile, CliError> {
    let (model, prior) = cfg.model.build()?;
    let xi = cfg.design();
    let streams = Substreams::new(cfg.seed).child("pilot", 0);
    let proposal = cfg.pilot.proposal.unwrap_or(cfg.estimator.proposal());
    let (n, m) = (cfg.pilot.n_outer, cfg.pilot.m_inner);
    let mut c = allocation::estimate_constants_pilot(
        &model,
        &prior,
        &xi,
        n,
        m,
        m,
        proposal,
        &cfg.solver,
        &streams.child("inner", 0),
    )?;
    if cfg.pilot.mc2la_variance {
        let v = allocation::estimate_variance_pilot_mc2la(
            &model,
            &prior,
            &xi,
            n,
            &cfg.solver,
            &streams.child("mc2la", 0),
        )?;
        c.mc2la_variance = Some(v);
    }
    if let Some(d) = &cfg.pilot.discretization {
        let BuiltinModel::SyntheticDisc { b, eta, gamma, .. } = cfg.model else {
            return Err(CliError::Config(
                "a discretization pilot needs the synthetic-disc model".into(),
            ));
        };
        let family = SyntheticDiscretized::new(b, eta, gamma)?;
        let m_c3 = if cfg.estimator == EstimatorKind::Dlmc {
            m
        } else {
            1
        };
        let fit = allocation::estimate_c3_pilot(
            |h| family.at(h),
            &xi,
            &d.h_grid,
            d.h_ref,
            cfg.estimator,
            d.n_outer,
            m_c3,
            &cfg.solver,
            &streams.child("mesh", 0),
        )?;
        if fit.below_noise_floor {
            log::warn!(
                "discretization bias is below the estimator noise floor at some mesh levels"
            );
        }
        c = c.with_discretization(fit.c3, fit.eta, gamma)?;
    }
    Ok(PilotFile {
        constants: c,
        provenance: Provenance {
            model: cfg.model.clone(),
            design: xi,
            seed: cfg.seed,
            proposal,
            n_outer: n,
            m_inner: m,
        },
    })
}

/// Optimal sample sizes for `kind`. MC2LA spends the whole tolerance on
/// the statistical error; constants with `C3` add the mesh size.
pub fn allocate(
    c: &PilotConstants,
    tol: f64,
    alpha: f64,
    kind: EstimatorKind,
) -> Result<Allocation, CliError> {
    let a = match kind {
        EstimatorKind::Mc2la => {
            let v = c
                .mc2la_variance
                .ok_or_else(|| CliError::Config("constants lack mc2la_variance".into()))?;
            allocation::allocate_statistical(v, tol, alpha)?
        }
        _ if c.c3.is_some() => allocation::allocate_with_discretization(c, tol, alpha)?,
        _ => allocation::allocate(c, tol, alpha)?,
    };
    Ok(a)
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateRow {
    pub estimator: EstimatorKind,
    pub xi: Vec<f64>,
    pub tol: f64,
    pub seed: u64,
    pub result: EigResult,
}

pub fn estimate_csv_header(d_xi: usize) -> String {
    let xi: Vec<String> = (0..d_xi).map(|i| format!("xi_{i}")).collect();
    format!(
        "estimator,{},tol,estimate,n,m1,m2,work,seed\n",
        xi.join(",")
    )
}

impl EstimateRow {
    pub fn csv_line(&self) -> String {
        let xi: Vec<String> = self.xi.iter().map(f64::to_string).collect();
        let r = &self.result;
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            self.estimator.name(),
            xi.join(","),
            self.tol,
            r.estimate,
            r.n_outer,
            r.m1_inner,
            r.m2_inner,
            r.work_units,
            self.seed
        )
    }
}

/// Allocates from `constants` (running a pilot when absent) and estimates
/// at the configured design and tolerance.
pub fn estimate(
    cfg: &RunConfig,
    constants: Option<&PilotConstants>,
) -> Result<EstimateRow, CliError> {
    let owned;
    let c = match constants {
        Some(c) => c,
        None => {
            owned = pilot(cfg)?.constants;
            &owned
        }
    };
    let alloc = allocate(c, cfg.tol, cfg.alpha, cfg.estimator)?;
    let result = run_allocated(cfg, &alloc, &Substreams::new(cfg.seed).child("estimate", 0))?;
    Ok(EstimateRow {
        estimator: cfg.estimator,
        xi: cfg.design(),
        tol: cfg.tol,
        seed: cfg.seed,
        result,
    })
}

fn run_allocated(
    cfg: &RunConfig,
    alloc: &Allocation,
    streams: &Substreams,
) -> Result<EigResult, CliError> {
    let model_at_mesh = match (&cfg.model, alloc.h_mesh) {
        (BuiltinModel::SyntheticDisc { b, eta, gamma, .. }, Some(h)) => {
            BuiltinModel::SyntheticDisc {
                b: *b,
                eta: *eta,
                gamma: *gamma,
                h,
            }
        }
        _ => cfg.model.clone(),
    };
    let (model, prior) = model_at_mesh.build()?;
    let mut r = estimators::estimate(
        cfg.estimator,
        &model,
        &prior,
        &cfg.design(),
        alloc.n_outer,
        alloc.m1_inner,
        alloc.m2_inner,
        streams,
        &cfg.solver,
    )?;
    r.allocation = Some(alloc.clone());
    Ok(r)
}

pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("the sweep command needs a `sweep` section".into()))?;
    let (model, prior) = cfg.model.build()?;
    let streams = Substreams::new(cfg.seed).child("sweep", 0);
    Ok(design::sweep_design(
        &model,
        &prior,
        &s.grid,
        cfg.estimator,
        s.n_outer,
        s.m_inner,
        &cfg.solver,
        &streams,
    )?)
}

pub fn optimize(cfg: &RunConfig) -> Result<DesignOutcome, CliError> {
    let settings = cfg.optimize.clone().unwrap_or_default();
    let problem = settings.problem(&cfg.model, cfg.design());
    let (model, prior) = cfg.model.build()?;
    let streams = Substreams::new(cfg.seed).child("optimize", 0);
    Ok(design::optimize_design(
        &problem,
        &model,
        &prior,
        cfg.estimator,
        &cfg.solver,
        &streams,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub tol: f64,
    pub runs: usize,
    pub exceedances: usize,
    pub expected: f64,
    pub allocation: Allocation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub reference: f64,
    pub rows: Vec<ConsistencyRow>,
}

impl ConsistencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tol,runs,exceedances,expected,kappa,n,m1,m2\n");
        for r in &self.rows {
            let a = &r.allocation;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.tol,
                r.runs,
                r.exceedances,
                r.expected,
                a.kappa,
                a.n_outer,
                a.m1_inner,
                a.m2_inner
            ));
        }
        out
    }
}

/// Runs the estimator `R` times per tolerance and counts errors against the
/// analytic EIG larger than the tolerance. One pilot serves all runs.
pub fn consistency(cfg: &RunConfig) -> Result<ConsistencyReport, CliError> {
    let xi = cfg.design();
    let reference = cfg.model.analytic_eig(&xi).ok_or_else(|| {
        CliError::NoOracle(format!(
            "model `{}` has no closed-form EIG",
            cfg.model.name()
        ))
    })?;
    let ConsistencySettings { tols, runs } = cfg.consistency.clone().ok_or_else(|| {
        CliError::Config("the consistency command needs a `consistency` section".into())
    })?;
    let mut report = ConsistencyReport {
        reference,
        rows: Vec::new(),
    };
    if runs == 0 {
        return Ok(report);
    }
    let constants = pilot(cfg)?.constants;
    let root = Substreams::new(cfg.seed).child("consistency", 0);
    for (k, &tol) in tols.iter().enumerate() {
        let alloc = allocate(&constants, tol, cfg.alpha, cfg.estimator)?;
        let mut exceedances = 0;
        for run in 0..runs {
            let streams = root.child("tol", k as u64).child("run", run as u64);
            let r = run_allocated(cfg, &alloc, &streams)?;
            if (r.estimate - reference).abs() > tol {
                exceedances += 1;
            }
        }
        report.rows.push(ConsistencyRow {
            tol,
            runs,
            exceedances,
            expected: runs as f64 * cfg.alpha,
            allocation: alloc,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example1() -> RunConfig {
        let mut cfg = RunConfig::new(BuiltinModel::Example1 { nuisance: true });
        cfg.pilot.n_outer = 50;
        cfg.pilot.m_inner = 5;
        cfg
    }

    #[test]
    fn pilot_file_round_trip() {
        let f = pilot(&example1()).unwrap();
        let c = &f.constants;
        assert!(c.c1 < 1e-6 && c.c2 < 1e-6);
        assert!(c.mc2la_variance.is_some());
        assert_eq!(PilotFile::from_json(&f.to_json()).unwrap(), f);
    }

    #[test]
    fn estimate_row_layout() {
        let row = estimate(&example1(), None).unwrap();
        let line = row.csv_line();
        assert!(line.starts_with("dlmc2is,0.5,0.1,"), "{line}");
        assert_eq!(
            line.trim_end().split(',').count(),
            estimate_csv_header(1).trim_end().split(',').count()
        );
    }

    #[test]
    fn consistency_needs_oracle() {
        let mut cfg = RunConfig::new(BuiltinModel::Pk {
            prior_reading: Default::default(),
        });
        cfg.consistency = Some(ConsistencySettings {
            tols: vec![0.5],
            runs: 1,
        });
        assert!(matches!(consistency(&cfg), Err(CliError::NoOracle(_))));
    }

    #[test]
    fn zero_runs_give_an_empty_report() {
        let mut cfg = example1();
        cfg.consistency = Some(ConsistencySettings {
            tols: vec![0.5],
            runs: 0,
        });
        let r = consistency(&cfg).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.to_csv().lines().count(), 1);
    }

    #[test]
    fn mc2la_needs_its_variance() {
        let c = PilotConstants::new(0.1, 0.1, 1.0).unwrap();
        assert!(matches!(
            allocate(&c, 0.1, 0.05, EstimatorKind::Mc2la),
            Err(CliError::Config(_))
        ));
    }
}
