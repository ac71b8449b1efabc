//! Pilot estimation of the bias and variance constants and the closed-form
//! optimal sample allocation.
//!
//! The error model is
//!
//! ```text
//! bias     ≈ C1/M1 + C2/M2 (+ C3 h^η)
//! variance ≈ (D3 + D1/M1 + D2/M2) / N
//! ```
//!
//! and the work `N (M1 + M2) h^-γ` is minimized subject to
//! `bias ≤ (1 − κ) TOL` and `variance ≤ (κ TOL / C_α)²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EigError, Result};
use crate::estimators::{self, EstimatorKind, Outer, ProposalKind};
use crate::laplace::SolverConfig;
use crate::logspace;
use crate::model::ExperimentModel;
use crate::prior::PriorSpec;
use crate::rng::Substreams;

/// Relative tolerance of [`verify_allocation`].
pub const VERIFY_REL_TOL: f64 = 1e-9;

/// Fraction of degenerate pilot batches above which the pilot fails.
const MAX_DEGENERATE_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotConstants {
    pub c1: f64,
    pub c2: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// Outer variance of the MC2LA summand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc2la_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub n_outer_pilot: usize,
    #[serde(default)]
    pub m_inner_pilot: usize,
}

impl PilotConstants {
    /// Constants with `D1 = 2 C1` and `D2 = 2 C2`.
    pub fn new(c1: f64, c2: f64, d3: f64) -> Result<Self> {
        let c = Self {
            c1,
            c2,
            d1: 2.0 * c1,
            d2: 2.0 * c2,
            d3,
            mc2la_variance: None,
            c3: None,
            eta: None,
            gamma: None,
            n_outer_pilot: 0,
            m_inner_pilot: 0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_discretization(mut self, c3: f64, eta: f64, gamma: f64) -> Result<Self> {
        self.c3 = Some(c3);
        self.eta = Some(eta);
        self.gamma = Some(gamma);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let core = [self.c1, self.c2, self.d1, self.d2, self.d3];
        let extra = [self.mc2la_variance, self.c3].into_iter().flatten();
        if core
            .into_iter()
            .chain(extra)
            .any(|v| !(v.is_finite() && v >= 0.0))
        {
            return Err(EigError::InvalidConfig(
                "pilot constants must be finite and non-negative".into(),
            ));
        }
        if self.d1 != 2.0 * self.c1 || self.d2 != 2.0 * self.c2 {
            return Err(EigError::InvalidConfig(
                "pilot constants need D1 = 2 C1 and D2 = 2 C2".into(),
            ));
        }
        for (name, v) in [("eta", self.eta), ("gamma", self.gamma)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(EigError::InvalidConfig(format!("{name} must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub kappa: f64,
    pub n_outer: usize,
    pub m1_inner: usize,
    pub m2_inner: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_mesh: Option<f64>,
    /// Work of the real-valued optimum.
    pub predicted_work: f64,
    pub c_alpha: f64,
    /// Real-valued optima before rounding.
    pub n_real: f64,
    pub m1_real: f64,
    pub m2_real: f64,
}

/// `Φ⁻¹(1 − α/2)`.
pub fn c_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EigError::InvalidConfig("alpha must lie in (0, 1)".into()));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(EigError::InvalidConfig(
            "TOL must be positive and finite".into(),
        ));
    }
    Ok(())
}

fn ceil_count(x: f64) -> Result<usize> {
    if !x.is_finite() {
        return Err(EigError::Infeasible(format!(
            "sample size {x} is not finite"
        )));
    }
    if x > usize::MAX as f64 / 2.0 {
        return Err(EigError::Infeasible(format!(
            "sample size {x:e} is too large"
        )));
    }
    Ok((x.ceil() as usize).max(1))
}

/// Optimal splitting parameter without discretization bias.
///
/// Rationalized form of `(8T + 3D3 − √(16 T D3 + 9 D3²)) / 8T`, which
/// cancels badly when `D3 ≫ TOL`.
pub fn kappa_star(d3: f64, tol: f64) -> f64 {
    (8.0 * tol + 4.0 * d3) / (8.0 * tol + 3.0 * d3 + (16.0 * tol * d3 + 9.0 * d3 * d3).sqrt())
}

/// Optimal `N`, `M1`, `M2` and `κ` for the double-loop estimators.
///
/// When `C1 = C2 = 0` the bias constraint is vacuous and the allocation
/// degenerates to [`allocate_statistical`] with variance `D3`.
pub fn allocate(c: &PilotConstants, tol: f64, alpha: f64) -> Result<Allocation> {
    check_tol(tol)?;
    c.validate()?;
    let ca = c_alpha(alpha)?;
    if c.c1 == 0.0 && c.c2 == 0.0 {
        return allocate_statistical(c.d3, tol, alpha);
    }
    if !(c.d3 > 0.0) {
        return Err(EigError::Infeasible("D3 must be positive".into()));
    }
    let kappa = kappa_star(c.d3, tol);
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(EigError::Infeasible(format!(
            "splitting parameter {kappa} outside (0, 1)"
        )));
    }
    let n = ca * ca * (c.d3 + 2.0 * (1.0 - kappa) * tol) / (kappa * kappa * tol * tol);
    let cross = (c.c1 * c.c2).sqrt();
    let m1 = (c.c1 + cross) / ((1.0 - kappa) * tol);
    let m2 = (c.c2 + cross) / ((1.0 - kappa) * tol);
    Ok(Allocation {
        kappa,
        n_outer: ceil_count(n)?,
        m1_inner: ceil_count(m1)?,
        m2_inner: ceil_count(m2)?,
        h_mesh: None,
        predicted_work: n * (m1 + m2),
        c_alpha: ca,
        n_real: n,
        m1_real: m1,
        m2_real: m2,
    })
}

/// `κ = 1`, `M1 = M2 = 1`, `N = C_α² V / TOL²`: the whole tolerance goes to
/// the statistical error of an estimator with per-sample variance `V`.
pub fn allocate_statistical(variance: f64, tol: f64, alpha: f64) -> Result<Allocation> {
    check_tol(tol)?;
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(EigError::InvalidConfig(
            "variance must be finite and non-negative".into(),
        ));
    }
    let ca = c_alpha(alpha)?;
    let n = ca * ca * variance / (tol * tol);
    Ok(Allocation {
        kappa: 1.0,
        n_outer: ceil_count(n)?,
        m1_inner: 1,
        m2_inner: 1,
        h_mesh: None,
        predicted_work: n,
        c_alpha: ca,
        n_real: n,
        m1_real: 1.0,
        m2_real: 1.0,
    })
}

/// Optimal `κ` with discretization bias `C3 h^η` and work `h^-γ`.
pub fn kappa_star_disc(d3: f64, tol: f64, eta: f64, gamma: f64) -> f64 {
    let root = (d3
        * (9.0 * d3 * eta * eta
            + 6.0 * d3 * eta * gamma
            + d3 * gamma * gamma
            + 16.0 * eta * eta * tol
            + 8.0 * tol * eta * gamma))
        .sqrt();
    let lead = 8.0 * tol * eta + 3.0 * d3 * eta + d3 * gamma + 4.0 * tol * gamma;
    4.0 * eta * (d3 + 2.0 * tol) / (lead + root)
}

/// Optimal `N`, `M1`, `M2`, `h` and `κ` with discretization bias.
pub fn allocate_with_discretization(
    c: &PilotConstants,
    tol: f64,
    alpha: f64,
) -> Result<Allocation> {
    check_tol(tol)?;
    c.validate()?;
    let (Some(c3), Some(eta), Some(gamma)) = (c.c3, c.eta, c.gamma) else {
        return Err(EigError::InvalidConfig(
            "discretized allocation needs C3, eta and gamma".into(),
        ));
    };
    if !(c3 > 0.0) {
        return Err(EigError::InvalidConfig("C3 must be positive".into()));
    }
    if !(c.d3 > 0.0) {
        return Err(EigError::Infeasible("D3 must be positive".into()));
    }
    let ca = c_alpha(alpha)?;
    let kappa = kappa_star_disc(c.d3, tol, eta, gamma);
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(EigError::Infeasible(format!(
            "no splitting parameter in (0, 1): got {kappa} for D3={}, TOL={tol}, eta={eta}, gamma={gamma}",
            c.d3
        )));
    }
    let budget = 1.0 - kappa * (1.0 + gamma / (2.0 * eta));
    if !(budget > 0.0) {
        return Err(EigError::Infeasible(format!(
            "no bias budget left for the inner loops (1 - kappa(1 + gamma/2eta) = {budget})"
        )));
    }
    let n = ca * ca / (kappa * kappa * tol) * (c.d3 / tol + 2.0 * budget);
    let cross = (c.c1 * c.c2).sqrt();
    // C1(1 + sqrt(C2/C1)) written so that C1 = 0 stays finite.
    let m1 = (c.c1 + cross) / (budget * tol);
    let m2 = (c.c2 + cross) / (budget * tol);
    let h = (gamma * kappa * tol / (2.0 * eta * c3)).powf(1.0 / eta);
    let (m1_inner, m2_inner) = if c.c1 == 0.0 && c.c2 == 0.0 {
        (1, 1)
    } else {
        (ceil_count(m1)?, ceil_count(m2)?)
    };
    Ok(Allocation {
        kappa,
        n_outer: ceil_count(n)?,
        m1_inner,
        m2_inner,
        h_mesh: Some(h),
        predicted_work: n * (m1 + m2).max(f64::MIN_POSITIVE) * h.powf(-gamma),
        c_alpha: ca,
        n_real: n,
        m1_real: m1,
        m2_real: m2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AllocationReport {
    pub bias_lhs: f64,
    pub bias_rhs: f64,
    pub variance_lhs: f64,
    pub variance_rhs: f64,
    pub kappa_valid: bool,
    pub ok: bool,
}

impl AllocationReport {
    pub fn bias_slack(&self) -> f64 {
        self.bias_rhs - self.bias_lhs
    }

    pub fn variance_slack(&self) -> f64 {
        self.variance_rhs - self.variance_lhs
    }
}

fn ratio(c: f64, m: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c / m
    }
}

/// Re-evaluates both constraints at the real-valued optima of `alloc`.
pub fn verify_allocation(c: &PilotConstants, alloc: &Allocation, tol: f64) -> AllocationReport {
    let statistical_only = c.c1 == 0.0 && c.c2 == 0.0;
    let kappa_valid =
        (alloc.kappa > 0.0 && alloc.kappa < 1.0) || (statistical_only && alloc.kappa == 1.0);
    let disc = match (alloc.h_mesh, c.c3, c.eta) {
        (Some(h), Some(c3), Some(eta)) => c3 * h.powf(eta),
        _ => 0.0,
    };
    let bias_lhs = disc + ratio(c.c1, alloc.m1_real) + ratio(c.c2, alloc.m2_real);
    let bias_rhs = (1.0 - alloc.kappa) * tol;
    let variance_lhs =
        (c.d3 + ratio(c.d1, alloc.m1_real) + ratio(c.d2, alloc.m2_real)) / alloc.n_real;
    let variance_rhs = (alloc.kappa * tol / alloc.c_alpha).powi(2);
    let within = |lhs: f64, rhs: f64| lhs <= rhs + VERIFY_REL_TOL * rhs.abs().max(lhs.abs());
    let ok = kappa_valid && within(bias_lhs, bias_rhs) && within(variance_lhs, variance_rhs);
    AllocationReport {
        bias_lhs,
        bias_rhs,
        variance_lhs,
        variance_rhs,
        kappa_valid,
        ok,
    }
}

/// Estimates `C1`, `C2`, `D3` from `n` outer samples with `m1`, `m2` inner
/// samples each.
///
/// `C1 = ½ E[V̂ / μ̂²]` over the inner-1 weights, likewise `C2`; the ratios
/// are formed from shifted log-weights. `D3` is the outer variance of
/// `log p̂(Y|θ) − log p̂(Y)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_constants_pilot(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    proposal: ProposalKind,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<PilotConstants> {
    if n < 2 || m1 < 2 || m2 < 2 {
        return Err(EigError::InvalidConfig(
            "pilot sizes must be at least 2".into(),
        ));
    }
    model.check_design(xi)?;
    let rows: Vec<Option<(f64, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let out =
                estimators::inner_log_weights(model, prior, xi, i, m1, m2, proposal, cfg, streams)?;
            Ok(out.value().and_then(|w| {
                let r1 = logspace::relative_variance(&w.log_w1)?;
                let r2 = logspace::relative_variance(&w.log_w2)?;
                let diff = logspace::log_mean_exp(&w.log_w1) - logspace::log_mean_exp(&w.log_w2);
                (r1.is_finite() && r2.is_finite() && diff.is_finite()).then_some((r1, r2, diff))
            }))
        })
        .collect::<Result<_>>()?;
    let valid: Vec<(f64, f64, f64)> = rows.iter().flatten().copied().collect();
    let skipped = n - valid.len();
    if skipped as f64 > MAX_DEGENERATE_FRACTION * n as f64 || valid.len() < 2 {
        return Err(EigError::TooManyDegenerate { skipped, total: n });
    }
    let k = valid.len() as f64;
    let c1 = 0.5 * valid.iter().map(|r| r.0).sum::<f64>() / k;
    let c2 = 0.5 * valid.iter().map(|r| r.1).sum::<f64>() / k;
    let diffs: Vec<f64> = valid.iter().map(|r| r.2).collect();
    let (_, d3) = logspace::mean_and_variance(&diffs);
    let mut c = PilotConstants::new(c1, c2, d3)?;
    c.n_outer_pilot = n;
    c.m_inner_pilot = m1.max(m2);
    Ok(c)
}

/// Outer sample variance of the MC2LA summand.
pub fn estimate_variance_pilot_mc2la(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<f64> {
    if n < 2 {
        return Err(EigError::InvalidConfig(
            "pilot size must be at least 2".into(),
        ));
    }
    let s = estimators::summands(
        EstimatorKind::Mc2la,
        model,
        prior,
        xi,
        n,
        1,
        1,
        cfg,
        streams,
    )?;
    let values: Vec<f64> = s.into_iter().filter_map(Outer::value).collect();
    let skipped = n - values.len();
    if skipped as f64 > MAX_DEGENERATE_FRACTION * n as f64 || values.len() < 2 {
        return Err(EigError::TooManyDegenerate { skipped, total: n });
    }
    Ok(logspace::mean_and_variance(&values).1)
}

/// One mesh level of a bias pilot.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasPoint {
    pub h: f64,
    /// Mean of `EIG_h − EIG_ref` over paired outer samples.
    pub bias: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct C3Fit {
    pub c3: f64,
    pub eta: f64,
    pub points: Vec<BiasPoint>,
    /// Some bias is within three standard errors of zero, so the fit is
    /// dominated by estimator noise.
    pub below_noise_floor: bool,
    pub monotone: bool,
}

/// Fits `|EIG_h − EIG_ref| ≈ C3 h^η` by log-log least squares.
///
/// `build(h)` returns the model at mesh `h`; every level reuses the outer
/// streams of the reference level `h_ref` so the differences are paired.
#[allow(clippy::too_many_arguments)]
pub fn estimate_c3_pilot<F>(
    build: F,
    xi: &[f64],
    h_grid: &[f64],
    h_ref: f64,
    kind: EstimatorKind,
    n: usize,
    m: usize,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<C3Fit>
where
    F: Fn(f64) -> Result<(ExperimentModel, PriorSpec)>,
{
    if h_grid.len() < 2 {
        return Err(EigError::InvalidConfig(
            "the h grid needs at least two points".into(),
        ));
    }
    if h_grid.iter().any(|&h| !(h > h_ref)) {
        return Err(EigError::InvalidConfig(
            "grid points must exceed the reference mesh".into(),
        ));
    }
    let run = |h: f64| -> Result<Vec<Outer<f64>>> {
        let (model, prior) = build(h)?;
        estimators::summands(kind, &model, &prior, xi, n, m, m, cfg, streams)
    };
    let reference = run(h_ref)?;
    let mut points = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let level = run(h)?;
        let diffs: Vec<f64> = level
            .iter()
            .zip(&reference)
            .filter_map(|pair| match pair {
                (Outer::Value(a), Outer::Value(b)) => Some(a - b),
                _ => None,
            })
            .collect();
        if diffs.len() < 2 {
            return Err(EigError::TooManyDegenerate {
                skipped: n - diffs.len(),
                total: n,
            });
        }
        let (mean, var) = logspace::mean_and_variance(&diffs);
        points.push(BiasPoint {
            h,
            bias: mean,
            std_error: (var / diffs.len() as f64).sqrt(),
        });
    }
    let below_noise_floor = points.iter().any(|p| p.bias.abs() <= 3.0 * p.std_error);
    let mut sorted = points.clone();
    sorted.sort_by(|a, b| a.h.total_cmp(&b.h));
    let monotone = sorted
        .windows(2)
        .all(|w| w[0].bias.abs() <= w[1].bias.abs());
    if !monotone {
        log::warn!("bias is not monotone in h; the C3 fit may be unreliable");
    }
    let xs: Vec<f64> = points.iter().map(|p| p.h.ln()).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|p| p.bias.abs().max(f64::MIN_POSITIVE).ln())
        .collect();
    let (slope, intercept) = linear_fit(&xs, &ys);
    Ok(C3Fit {
        c3: intercept.exp(),
        eta: slope,
        points,
        below_noise_floor,
        monotone,
    })
}

/// Least-squares slope and intercept.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
