//! Run configuration: one JSON document with a versioned schema.

use std::path::{Path, PathBuf};

use nuisance_eig::design::{DesignProblem, StepRule};
use nuisance_eig::estimators::ProposalKind;
use nuisance_eig::models::BuiltinModel;
use nuisance_eig::{EstimatorKind, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: BuiltinModel,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    /// Defaults to the model's reference design.
    #[serde(default)]
    pub design: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub pilot: PilotSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub optimize: Option<OptimizeSettings>,
    #[serde(default)]
    pub consistency: Option<ConsistencySettings>,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::Dlmc2is
}
fn default_tol() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSettings {
    #[serde(default = "default_pilot_n")]
    pub n_outer: usize,
    #[serde(default = "default_pilot_m")]
    pub m_inner: usize,
    /// Inner proposal of the pilot; defaults to the estimator's own.
    #[serde(default)]
    pub proposal: Option<ProposalKind>,
    /// Also estimate the MC2LA outer variance.
    #[serde(default = "default_true")]
    pub mc2la_variance: bool,
    #[serde(default)]
    pub discretization: Option<DiscretizationPilot>,
}

fn default_pilot_n() -> usize {
    100
}
fn default_pilot_m() -> usize {
    30
}
fn default_true() -> bool {
    true
}

impl Default for PilotSettings {
    fn default() -> Self {
        Self {
            n_outer: default_pilot_n(),
            m_inner: default_pilot_m(),
            proposal: None,
            mc2la_variance: true,
            discretization: None,
        }
    }
}

/// Mesh levels for the `C3`, `η` pilot of the synthetic discretized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationPilot {
    pub h_grid: Vec<f64>,
    #[serde(default)]
    pub h_ref: f64,
    #[serde(default = "default_c3_n")]
    pub n_outer: usize,
}

fn default_c3_n() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub grid: Vec<Vec<f64>>,
    #[serde(default = "default_sweep_n")]
    pub n_outer: usize,
    #[serde(default = "default_sweep_m")]
    pub m_inner: usize,
}

fn default_sweep_n() -> usize {
    1000
}
fn default_sweep_m() -> usize {
    1
}

/// Design search settings; bounds and start default to the model's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSettings {
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub initial_design: Option<Vec<f64>>,
    #[serde(default = "default_minibatch")]
    pub minibatch_n: usize,
    #[serde(default = "default_sweep_m")]
    pub inner_samples: usize,
    #[serde(default)]
    pub coordinate_order: Vec<usize>,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step_design: f64,
    #[serde(default = "default_move_tol")]
    pub move_tol: f64,
}

fn default_minibatch() -> usize {
    300
}
fn default_max_sweeps() -> usize {
    20
}
fn default_fd_step() -> f64 {
    1e-2
}
fn default_move_tol() -> f64 {
    1e-6
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        Self {
            bounds: None,
            initial_design: None,
            minibatch_n: default_minibatch(),
            inner_samples: 1,
            coordinate_order: Vec::new(),
            step_rule: StepRule::default(),
            max_sweeps: default_max_sweeps(),
            fd_step_design: default_fd_step(),
            move_tol: default_move_tol(),
        }
    }
}

impl OptimizeSettings {
    pub fn problem(&self, model: &BuiltinModel, start: Vec<f64>) -> DesignProblem {
        let mut p = DesignProblem::new(
            self.bounds.clone().unwrap_or_else(|| model.design_bounds()),
            self.initial_design.clone().unwrap_or(start),
        );
        p.minibatch_n = self.minibatch_n;
        p.inner_samples = self.inner_samples;
        p.coordinate_order = self.coordinate_order.clone();
        p.step_rule = self.step_rule.clone();
        p.max_sweeps = self.max_sweeps;
        p.fd_step_design = self.fd_step_design;
        p.move_tol = self.move_tol;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySettings {
    pub tols: Vec<f64>,
    pub runs: usize,
}

impl RunConfig {
    pub fn new(model: BuiltinModel) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model,
            estimator: default_estimator(),
            design: None,
            tol: default_tol(),
            alpha: default_alpha(),
            pilot: PilotSettings::default(),
            seed: 0,
            threads: None,
            output: None,
            solver: SolverConfig::default(),
            sweep: None,
            optimize: None,
            consistency: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn design(&self) -> Vec<f64> {
        self.design
            .clone()
            .unwrap_or_else(|| self.model.default_design())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad("tol must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)".into());
        }
        if self.pilot.n_outer < 2 || self.pilot.m_inner < 2 {
            return bad("pilot sizes must be at least 2".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        self.solver.validate()?;
        let (model, _) = self.model.build()?;
        model.check_design(&self.design())?;
        if let Some(s) = &self.sweep {
            if s.n_outer == 0 || s.m_inner == 0 {
                return bad("sweep sizes must be at least 1".into());
            }
            for xi in &s.grid {
                model.check_design(xi)?;
            }
        }
        if let Some(c) = &self.consistency {
            if c.tols.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return bad("consistency tolerances must be positive".into());
            }
        }
        if let Some(o) = &self.optimize {
            o.problem(&self.model, self.design()).validate()?;
        }
        Ok(())
    }
}
