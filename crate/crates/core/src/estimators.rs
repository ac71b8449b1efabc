//! EIG estimators: DLMC, DLMC2IS and MC2LA.
//!
//! Every outer sample `n` draws from its own substreams (parameters, noise,
//! inner loop 1, inner loop 2), and per-sample results are reduced in index
//! order, so estimates do not depend on the number of worker threads. The
//! same streams at two designs give common random numbers.

use std::f64::consts::PI;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{self, Allocation, PilotConstants};
use crate::error::{EigError, Result};
use crate::laplace::{LaplaceFit, Posterior, SolverConfig};
use crate::logspace;
use crate::model::ExperimentModel;
use crate::prior::PriorSpec;
use crate::rng::{StreamRng, Substreams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Dlmc,
    Dlmc2is,
    Mc2la,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dlmc => "dlmc",
            Self::Dlmc2is => "dlmc2is",
            Self::Mc2la => "mc2la",
        }
    }

    /// Proposal used by the inner loops of the double-loop kinds.
    pub fn proposal(self) -> ProposalKind {
        match self {
            Self::Dlmc2is => ProposalKind::Laplace,
            _ => ProposalKind::Prior,
        }
    }
}

/// Inner-loop sampling measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    Prior,
    #[serde(alias = "laplace-is")]
    Laplace,
}

#[derive(Clone, Debug, Serialize)]
pub struct EigResult {
    pub estimate: f64,
    pub n_outer: usize,
    pub m1_inner: usize,
    pub m2_inner: usize,
    pub sample_variance_outer: f64,
    pub work_units: f64,
    /// Outer samples skipped because an inner average was zero.
    pub degenerate_inner_count: usize,
    /// Outer samples skipped because a Laplace fit failed twice.
    pub failed_fit_count: usize,
    /// More than 1% of the outer samples were skipped.
    pub flagged: bool,
    pub allocation: Option<Allocation>,
}

impl EigResult {
    pub fn used_samples(&self) -> usize {
        self.n_outer - self.degenerate_inner_count - self.failed_fit_count
    }

    pub fn std_error(&self) -> f64 {
        (self.sample_variance_outer / self.used_samples() as f64).sqrt()
    }
}

/// Outcome of one outer sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Outer<T> {
    Value(T),
    Degenerate,
    FitFailed,
}

impl<T> Outer<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Self::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// Inner log-weights of one outer sample: `log p(Y | θ, φ_m) + log π − log q`.
#[derive(Clone, Debug)]
pub struct InnerWeights {
    pub log_w1: Vec<f64>,
    pub log_w2: Vec<f64>,
}

struct OuterStreams {
    param: StreamRng,
    noise: StreamRng,
    inner1: StreamRng,
    inner2: StreamRng,
}

fn outer_streams(streams: &Substreams, n: usize) -> OuterStreams {
    let s = streams.child("outer", n as u64);
    OuterStreams {
        param: s.stream("param", 0),
        noise: s.stream("noise", 0),
        inner1: s.stream("inner1", 0),
        inner2: s.stream("inner2", 0),
    }
}

fn check_sizes(n: usize, m1: usize, m2: usize) -> Result<()> {
    if n == 0 || m1 == 0 || m2 == 0 {
        return Err(EigError::InvalidConfig(
            "sample sizes must be at least 1".into(),
        ));
    }
    Ok(())
}

fn check_dims(model: &ExperimentModel, prior: &PriorSpec, xi: &[f64]) -> Result<()> {
    model.check_design(xi)?;
    if prior.d_theta() != model.d_theta() || prior.d_phi() != model.d_phi() {
        return Err(EigError::Dimension {
            what: "prior",
            expected: model.d_theta() + model.d_phi(),
            got: prior.d_theta() + prior.d_phi(),
        });
    }
    Ok(())
}

/// Runs a Laplace fit, retrying once with fresh multistart draws and no hint.
fn with_retry<F>(cfg: &SolverConfig, mut fit: F) -> Option<LaplaceFit>
where
    F: FnMut(&SolverConfig, bool) -> Result<LaplaceFit>,
{
    match fit(cfg, true) {
        Ok(f) => Some(f),
        Err(e) => {
            log::debug!("Laplace fit failed ({e}); retrying");
            fit(&cfg.retry(1), false).ok()
        }
    }
}

/// Inner log-weights for outer sample `n`.
#[allow(clippy::too_many_arguments)]
pub fn inner_log_weights(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    proposal: ProposalKind,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<Outer<InnerWeights>> {
    let mut rng = outer_streams(streams, n);
    let (theta, phi) = prior.sample(&mut rng.param);
    let data = model.sample_data(xi, theta.as_slice(), phi.as_slice(), &mut rng.noise)?;
    let post = Posterior::new(model, prior, &data)?;
    let loglik = |t: &[f64], p: &[f64]| model.log_likelihood_whitened(&post.data, xi, t, p);

    let mut log_w1 = Vec::with_capacity(m1);
    let mut log_w2 = Vec::with_capacity(m2);
    match proposal {
        ProposalKind::Prior => {
            for _ in 0..m1 {
                let p = prior.sample_phi(theta.as_slice(), &mut rng.inner1);
                log_w1.push(loglik(theta.as_slice(), p.as_slice())?);
            }
            for _ in 0..m2 {
                let (t, p) = prior.sample(&mut rng.inner2);
                log_w2.push(loglik(t.as_slice(), p.as_slice())?);
            }
        }
        ProposalKind::Laplace => {
            let Some(fit1) = with_retry(cfg, |c, hinted| {
                post.fit_nuisance_map(theta.as_slice(), c, hinted.then_some(&phi))
            }) else {
                return Ok(Outer::FitFailed);
            };
            let truth = DVector::from_iterator(
                theta.len() + phi.len(),
                theta.iter().chain(phi.iter()).copied(),
            );
            let Some(fit2) = with_retry(cfg, |c, hinted| {
                post.fit_joint_map(c, hinted.then_some(&truth))
            }) else {
                return Ok(Outer::FitFailed);
            };
            for _ in 0..m1 {
                let p = fit1.sample(&mut rng.inner1);
                let lp = prior.log_phi_given_theta(theta.as_slice(), p.as_slice());
                log_w1.push(if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    loglik(theta.as_slice(), p.as_slice())? + lp - fit1.log_density(p.as_slice())
                });
            }
            for _ in 0..m2 {
                let z = fit2.sample(&mut rng.inner2);
                let (t, p) = post.split(&z);
                let lp = prior.log_joint(t, p);
                log_w2.push(if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    loglik(t, p)? + lp - fit2.log_density(z.as_slice())
                });
            }
        }
    }
    Ok(Outer::Value(InnerWeights { log_w1, log_w2 }))
}

/// `log p̂(Y | θ) − log p̂(Y)` for outer sample `n`.
#[allow(clippy::too_many_arguments)]
pub fn double_loop_summand(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    proposal: ProposalKind,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<Outer<f64>> {
    Ok(
        match inner_log_weights(model, prior, xi, n, m1, m2, proposal, cfg, streams)? {
            Outer::Value(w) => {
                let v = logspace::log_mean_exp(&w.log_w1) - logspace::log_mean_exp(&w.log_w2);
                if v.is_finite() {
                    Outer::Value(v)
                } else {
                    Outer::Degenerate
                }
            }
            Outer::Degenerate => Outer::Degenerate,
            Outer::FitFailed => Outer::FitFailed,
        },
    )
}

/// Per-sample MC2LA term
/// `−½ log det(2πΣ) − d_θ/2 − log π(θ̂) − ½ tr(Σ ∇² log π(θ̂))`.
pub fn mc2la_summand(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<Outer<f64>> {
    let mut rng = outer_streams(streams, n);
    let (theta, phi) = prior.sample(&mut rng.param);
    let data = model.sample_data(xi, theta.as_slice(), phi.as_slice(), &mut rng.noise)?;
    let post = Posterior::new(model, prior, &data)?;
    let Some(fit) = with_retry(cfg, |c, hinted| {
        post.fit_theta_map(c, hinted.then_some(&theta))
    }) else {
        return Ok(Outer::FitFailed);
    };
    Ok(Outer::Value(mc2la_term(prior, &fit)))
}

pub(crate) fn mc2la_term(prior: &PriorSpec, fit: &LaplaceFit) -> f64 {
    let d = fit.dim() as f64;
    let th = fit.mode.as_slice();
    let cov = fit.covariance();
    let trace = (&cov * prior.theta.hess_log_density(th)).trace();
    0.5 * fit.log_det_precision
        - 0.5 * d * (2.0 * PI).ln()
        - 0.5 * d
        - prior.theta.log_density(th)
        - 0.5 * trace
}

/// Per-sample summands for any estimator kind, in outer-index order.
#[allow(clippy::too_many_arguments)]
pub fn summands(
    kind: EstimatorKind,
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<Vec<Outer<f64>>> {
    check_dims(model, prior, xi)?;
    check_sizes(n, m1, m2)?;
    (0..n)
        .into_par_iter()
        .map(|i| match kind {
            EstimatorKind::Mc2la => mc2la_summand(model, prior, xi, i, cfg, streams),
            k => double_loop_summand(model, prior, xi, i, m1, m2, k.proposal(), cfg, streams),
        })
        .collect()
}

/// Reduces per-sample summands in index order.
pub fn reduce(
    outcomes: &[Outer<f64>],
    m1: usize,
    m2: usize,
    work_per_sample: f64,
) -> Result<EigResult> {
    let n = outcomes.len();
    let mut values = Vec::with_capacity(n);
    let (mut degenerate, mut failed) = (0, 0);
    for o in outcomes {
        match o {
            Outer::Value(v) => values.push(*v),
            Outer::Degenerate => degenerate += 1,
            Outer::FitFailed => failed += 1,
        }
    }
    if values.is_empty() {
        return Err(EigError::TooManyDegenerate {
            skipped: n,
            total: n,
        });
    }
    let (mean, var) = logspace::mean_and_variance(&values);
    let skipped = degenerate + failed;
    let flagged = skipped as f64 > 0.01 * n as f64;
    if flagged {
        log::warn!("{skipped} of {n} outer samples skipped");
    }
    Ok(EigResult {
        estimate: mean,
        n_outer: n,
        m1_inner: m1,
        m2_inner: m2,
        sample_variance_outer: var,
        work_units: n as f64 * work_per_sample,
        degenerate_inner_count: degenerate,
        failed_fit_count: failed,
        flagged,
        allocation: None,
    })
}

fn double_loop_work(model: &ExperimentModel, m1: usize, m2: usize) -> f64 {
    (m1 + m2) as f64 * model.work_factor()
}

/// Double-loop Monte Carlo with prior sampling in both inner loops.
pub fn dlmc(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    streams: &Substreams,
) -> Result<EigResult> {
    let cfg = SolverConfig::default();
    let s = summands(
        EstimatorKind::Dlmc,
        model,
        prior,
        xi,
        n,
        m1,
        m2,
        &cfg,
        streams,
    )?;
    reduce(&s, m1, m2, double_loop_work(model, m1, m2))
}

/// Double-loop Monte Carlo with Laplace importance sampling in both inner
/// loops (or prior sampling when `proposal` is [`ProposalKind::Prior`]).
#[allow(clippy::too_many_arguments)]
pub fn dlmc2is(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    streams: &Substreams,
    cfg: &SolverConfig,
    proposal: ProposalKind,
) -> Result<EigResult> {
    check_dims(model, prior, xi)?;
    check_sizes(n, m1, m2)?;
    let s: Vec<Outer<f64>> = (0..n)
        .into_par_iter()
        .map(|i| double_loop_summand(model, prior, xi, i, m1, m2, proposal, cfg, streams))
        .collect::<Result<_>>()?;
    reduce(&s, m1, m2, double_loop_work(model, m1, m2))
}

pub fn mc2la(
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    streams: &Substreams,
    cfg: &SolverConfig,
) -> Result<EigResult> {
    let s = summands(
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
    let mut r = reduce(&s, 0, 0, model.work_factor())?;
    r.m1_inner = 0;
    r.m2_inner = 0;
    Ok(r)
}

/// Runs `kind` with explicit sample sizes (`m1`, `m2` ignored for MC2LA).
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    kind: EstimatorKind,
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    n: usize,
    m1: usize,
    m2: usize,
    streams: &Substreams,
    cfg: &SolverConfig,
) -> Result<EigResult> {
    match kind {
        EstimatorKind::Dlmc => dlmc(model, prior, xi, n, m1, m2, streams),
        EstimatorKind::Dlmc2is => dlmc2is(
            model,
            prior,
            xi,
            n,
            m1,
            m2,
            streams,
            cfg,
            ProposalKind::Laplace,
        ),
        EstimatorKind::Mc2la => mc2la(model, prior, xi, n, streams, cfg),
    }
}

/// Allocates samples for tolerance `tol` at confidence `1 − α` from the
/// pilot constants and runs the estimator.
///
/// MC2LA uses only its variance pilot: its Laplace bias is not modeled, so
/// the whole tolerance goes to the statistical error.
#[allow(clippy::too_many_arguments)]
pub fn run_to_tolerance(
    kind: EstimatorKind,
    model: &ExperimentModel,
    prior: &PriorSpec,
    xi: &[f64],
    tol: f64,
    alpha: f64,
    pilot: &PilotConstants,
    streams: &Substreams,
    cfg: &SolverConfig,
) -> Result<EigResult> {
    let alloc = match kind {
        EstimatorKind::Mc2la => {
            let v = pilot.mc2la_variance.ok_or_else(|| {
                EigError::InvalidConfig("pilot constants lack the MC2LA variance".into())
            })?;
            allocation::allocate_statistical(v, tol, alpha)?
        }
        _ => allocation::allocate(pilot, tol, alpha)?,
    };
    let mut r = estimate(
        kind,
        model,
        prior,
        xi,
        alloc.n_outer,
        alloc.m1_inner,
        alloc.m2_inner,
        streams,
        cfg,
    )?;
    r.allocation = Some(alloc);
    Ok(r)
}
