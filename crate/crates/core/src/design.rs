//! Design search: greedy minibatch coordinate ascent on the EIG and grid
//! sweeps.
//!
//! All probes within one coordinate update share substreams, so the
//! finite-difference gradient and the accept/reject comparison use common
//! random numbers.

use serde::{Deserialize, Serialize};

use crate::error::{EigError, Result};
use crate::estimators::{self, EstimatorKind, Outer};
use crate::laplace::SolverConfig;
use crate::logspace;
use crate::model::ExperimentModel;
use crate::prior::PriorSpec;
use crate::rng::Substreams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepDecay {
    /// `step_0 / √sweep`.
    #[default]
    InvSqrt,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRule {
    /// Initial step as a fraction of each coordinate's range.
    #[serde(default = "default_step_fraction")]
    pub initial_fraction: f64,
    #[serde(default)]
    pub decay: StepDecay,
}

fn default_step_fraction() -> f64 {
    0.05
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial_fraction: default_step_fraction(),
            decay: StepDecay::InvSqrt,
        }
    }
}

impl StepRule {
    fn step(&self, range: f64, sweep: usize) -> f64 {
        let s0 = self.initial_fraction * range;
        match self.decay {
            StepDecay::InvSqrt => s0 / (sweep as f64).sqrt(),
            StepDecay::Constant => s0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignProblem {
    pub bounds: Vec<(f64, f64)>,
    pub initial_design: Vec<f64>,
    #[serde(default = "default_minibatch")]
    pub minibatch_n: usize,
    /// Inner samples per loop for the double-loop kinds.
    #[serde(default = "default_inner")]
    pub inner_samples: usize,
    /// Visiting order of the coordinates; empty means `0..d_ξ`.
    #[serde(default)]
    pub coordinate_order: Vec<usize>,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step_design: f64,
    /// A sweep moving no coordinate by more than this ends the search.
    #[serde(default = "default_move_tol")]
    pub move_tol: f64,
}

fn default_minibatch() -> usize {
    300
}
fn default_inner() -> usize {
    1
}
fn default_sweeps() -> usize {
    20
}
fn default_fd_step() -> f64 {
    1e-2
}
fn default_move_tol() -> f64 {
    1e-6
}

impl DesignProblem {
    pub fn new(bounds: Vec<(f64, f64)>, initial_design: Vec<f64>) -> Self {
        Self {
            bounds,
            initial_design,
            minibatch_n: default_minibatch(),
            inner_samples: default_inner(),
            coordinate_order: Vec::new(),
            step_rule: StepRule::default(),
            max_sweeps: default_sweeps(),
            fd_step_design: default_fd_step(),
            move_tol: default_move_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.bounds.len();
        if self.initial_design.len() != d {
            return Err(EigError::Dimension {
                what: "initial design",
                expected: d,
                got: self.initial_design.len(),
            });
        }
        for (x, &(lo, hi)) in self.initial_design.iter().zip(&self.bounds) {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(EigError::InvalidConfig(format!(
                    "bad design bounds ({lo}, {hi})"
                )));
            }
            if !(lo <= *x && *x <= hi) {
                return Err(EigError::InvalidConfig(format!(
                    "initial design {x} outside ({lo}, {hi})"
                )));
            }
        }
        if self.minibatch_n == 0 || self.inner_samples == 0 {
            return Err(EigError::InvalidConfig(
                "minibatch sizes must be at least 1".into(),
            ));
        }
        if !(self.fd_step_design > 0.0)
            || !(self.step_rule.initial_fraction >= 0.0)
            || !(self.move_tol >= 0.0)
        {
            return Err(EigError::InvalidConfig(
                "design steps must be non-negative".into(),
            ));
        }
        if !self.coordinate_order.is_empty() {
            let mut seen = self.coordinate_order.clone();
            seen.sort_unstable();
            if seen != (0..d).collect::<Vec<_>>() {
                return Err(EigError::InvalidConfig(
                    "coordinate order must be a permutation".into(),
                ));
            }
        }
        Ok(())
    }

    fn order(&self) -> Vec<usize> {
        if self.coordinate_order.is_empty() {
            (0..self.bounds.len()).collect()
        } else {
            self.coordinate_order.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub sweep: usize,
    /// `None` for the starting point.
    pub coordinate: Option<usize>,
    pub xi: Vec<f64>,
    pub eig: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignOutcome {
    pub xi: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// Minibatch estimator at `xi` with fixed streams.
pub struct Minibatch<'a> {
    pub kind: EstimatorKind,
    pub model: &'a ExperimentModel,
    pub prior: &'a PriorSpec,
    pub n: usize,
    pub m: usize,
    pub cfg: &'a SolverConfig,
}

impl Minibatch<'_> {
    /// Per-sample summands, with skipped samples as `None`.
    pub fn summands(&self, xi: &[f64], streams: &Substreams) -> Result<Vec<Option<f64>>> {
        let s = estimators::summands(
            self.kind, self.model, self.prior, xi, self.n, self.m, self.m, self.cfg, streams,
        )?;
        let out: Vec<Option<f64>> = s.into_iter().map(Outer::value).collect();
        if out.iter().all(Option::is_none) {
            return Err(EigError::TooManyDegenerate {
                skipped: self.n,
                total: self.n,
            });
        }
        Ok(out)
    }

    /// Mean and standard error at `xi`.
    pub fn eig(&self, xi: &[f64], streams: &Substreams) -> Result<(f64, f64)> {
        let vals: Vec<f64> = self.summands(xi, streams)?.into_iter().flatten().collect();
        Ok(mean_and_stderr(&vals))
    }

    /// Central difference of the EIG in coordinate `j` with common random
    /// numbers. Returns the slope and its standard error.
    pub fn coordinate_gradient(
        &self,
        xi: &[f64],
        j: usize,
        delta: f64,
        bounds: (f64, f64),
        streams: &Substreams,
    ) -> Result<(f64, f64)> {
        let mut lo = xi.to_vec();
        let mut hi = xi.to_vec();
        lo[j] = (xi[j] - delta).max(bounds.0);
        hi[j] = (xi[j] + delta).min(bounds.1);
        let width = hi[j] - lo[j];
        if !(width > 0.0) {
            return Ok((0.0, 0.0));
        }
        let a = self.summands(&lo, streams)?;
        let b = self.summands(&hi, streams)?;
        let diffs: Vec<f64> = a
            .iter()
            .zip(&b)
            .filter_map(|(x, y)| Some((*y)? - (*x)?))
            .map(|d| d / width)
            .collect();
        if diffs.is_empty() {
            return Err(EigError::TooManyDegenerate {
                skipped: self.n,
                total: self.n,
            });
        }
        let (g, se) = mean_and_stderr(&diffs);
        if !g.is_finite() {
            return Err(EigError::InvalidConfig("non-finite design gradient".into()));
        }
        Ok((g, se))
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let (mean, var) = logspace::mean_and_variance(values);
    let se = if values.len() > 1 {
        (var / values.len() as f64).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

/// Greedy minibatch coordinate ascent.
///
/// Each coordinate takes a step of the current size in the direction of
/// its CRN gradient estimate. The step is accepted when the minibatch EIG
/// does not decrease; otherwise it is halved once and then skipped. A
/// failed probe halves the step and is retried once before the coordinate
/// is frozen for the rest of the sweep.
pub fn optimize_design(
    problem: &DesignProblem,
    model: &ExperimentModel,
    prior: &PriorSpec,
    kind: EstimatorKind,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<DesignOutcome> {
    problem.validate()?;
    model.check_design(&problem.initial_design)?;
    let mb = Minibatch {
        kind,
        model,
        prior,
        n: problem.minibatch_n,
        m: problem.inner_samples,
        cfg,
    };
    let mut xi = problem.initial_design.clone();
    let (eig0, se0) = mb.eig(&xi, &streams.child("start", 0))?;
    let mut trace = vec![TraceRow {
        sweep: 0,
        coordinate: None,
        xi: xi.clone(),
        eig: eig0,
        stderr: se0,
    }];

    for sweep in 1..=problem.max_sweeps {
        let sweep_streams = streams.child("sweep", sweep as u64);
        let mut largest_move = 0.0f64;
        for j in problem.order() {
            let s = sweep_streams.child("coordinate", j as u64);
            let bounds = problem.bounds[j];
            let step = problem.step_rule.step(bounds.1 - bounds.0, sweep);
            let before = xi[j];
            if let Some(row) =
                update_coordinate(&mb, &mut xi, j, step, problem.fd_step_design, bounds, &s)
            {
                largest_move = largest_move.max((xi[j] - before).abs());
                trace.push(TraceRow {
                    sweep,
                    coordinate: Some(j),
                    xi: xi.clone(),
                    eig: row.0,
                    stderr: row.1,
                });
            }
        }
        if largest_move <= problem.move_tol {
            break;
        }
    }
    Ok(DesignOutcome { xi, trace })
}

/// One coordinate update. Returns the minibatch EIG at the resulting design,
/// or `None` when the coordinate was frozen.
fn update_coordinate(
    mb: &Minibatch,
    xi: &mut [f64],
    j: usize,
    step: f64,
    delta: f64,
    bounds: (f64, f64),
    streams: &Substreams,
) -> Option<(f64, f64)> {
    let (mut step, mut delta) = (step, delta);
    for _ in 0..2 {
        match try_step(mb, xi, j, step, delta, bounds, streams) {
            Ok(v) => return Some(v),
            Err(e) => {
                log::warn!("design probe failed on coordinate {j}: {e}");
                step *= 0.5;
                delta *= 0.5;
            }
        }
    }
    None
}

fn try_step(
    mb: &Minibatch,
    xi: &mut [f64],
    j: usize,
    step: f64,
    delta: f64,
    bounds: (f64, f64),
    streams: &Substreams,
) -> Result<(f64, f64)> {
    let current = mb.eig(xi, streams)?;
    if step == 0.0 {
        return Ok(current);
    }
    let (grad, _) = mb.coordinate_gradient(xi, j, delta, bounds, streams)?;
    if grad == 0.0 {
        return Ok(current);
    }
    let mut s = step;
    for _ in 0..2 {
        let mut trial = xi.to_vec();
        trial[j] = (xi[j] + s * grad.signum()).clamp(bounds.0, bounds.1);
        let value = mb.eig(&trial, streams)?;
        if value.0 >= current.0 {
            xi[j] = trial[j];
            return Ok(value);
        }
        s *= 0.5;
    }
    Ok(current)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub xi: Vec<f64>,
    /// `None` when the estimator failed at this point.
    pub eig: Option<f64>,
    pub stderr: Option<f64>,
}

/// Evaluates the estimator on every grid point with the same streams.
#[allow(clippy::too_many_arguments)]
pub fn sweep_design(
    model: &ExperimentModel,
    prior: &PriorSpec,
    grid: &[Vec<f64>],
    kind: EstimatorKind,
    n: usize,
    m: usize,
    cfg: &SolverConfig,
    streams: &Substreams,
) -> Result<Vec<SweepRow>> {
    if n == 0 || m == 0 {
        return Err(EigError::InvalidConfig(
            "sample sizes must be at least 1".into(),
        ));
    }
    let rows = grid
        .iter()
        .map(
            |xi| match estimators::estimate(kind, model, prior, xi, n, m, m, streams, cfg) {
                Ok(r) => SweepRow {
                    xi: xi.clone(),
                    eig: Some(r.estimate),
                    stderr: Some(r.std_error()),
                },
                Err(e) => {
                    log::warn!("sweep point {xi:?} failed: {e}");
                    SweepRow {
                        xi: xi.clone(),
                        eig: None,
                        stderr: None,
                    }
                }
            },
        )
        .collect();
    Ok(rows)
}

fn xi_header(d: usize) -> String {
    (0..d)
        .map(|i| format!("xi_{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// CSV with columns `sweep,coordinate,xi_0..,eig,stderr`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let d = trace.first().map_or(0, |r| r.xi.len());
    let mut out = format!("sweep,coordinate,{},eig,stderr\n", xi_header(d));
    for r in trace {
        let coord = r.coordinate.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sweep,
            coord,
            join(&r.xi),
            r.eig,
            r.stderr
        ));
    }
    out
}

/// CSV with columns `xi_0..,eig,stderr`; failed points have empty cells.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let d = rows.first().map_or(0, |r| r.xi.len());
    let mut out = format!("{},eig,stderr\n", xi_header(d));
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            join(&r.xi),
            cell(r.eig),
            cell(r.stderr)
        ));
    }
    out
}
