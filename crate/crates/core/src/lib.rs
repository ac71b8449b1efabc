//! Expected information gain estimation for experiments with nuisance
//! parameters.
//!
//! The crate provides three estimators of the EIG about the parameters of
//! interest `θ` when the data also depend on nuisance parameters `φ`:
//!
//! * [`estimators::dlmc`]: double-loop Monte Carlo with two inner loops,
//! * [`estimators::dlmc2is`]: the same with Laplace importance sampling in
//!   both inner loops,
//! * [`estimators::mc2la`]: Monte Carlo over a double Laplace approximation.
//!
//! [`allocation`] turns pilot estimates of the bias and variance constants
//! into optimal sample sizes for a target tolerance, and [`design`] runs a
//! coordinate stochastic-gradient search over designs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod design;
pub mod error;
pub mod estimators;
pub mod laplace;
pub mod linalg;
pub mod logspace;
pub mod model;
pub mod models;
pub mod optim;
pub mod prior;
pub mod rng;

pub use allocation::{Allocation, PilotConstants};
pub use error::{EigError, Result};
pub use estimators::{EigResult, EstimatorKind};
pub use laplace::{LaplaceFit, SolverConfig};
pub use model::{Dataset, ExperimentModel, ForwardModel};
pub use prior::{Distribution, PriorSpec};
pub use rng::Substreams;
