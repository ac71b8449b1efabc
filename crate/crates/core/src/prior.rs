//! Prior densities.
//!
//! The joint prior is stored as `π(θ) · π(φ | θ)`. Independent priors use a
//! φ-factor that ignores θ.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EigError, Result};
use crate::linalg;

/// Amount by which box supports are shrunk before MAP solves.
pub const BOX_SHRINK: f64 = 1e-9;

#[derive(Clone)]
pub struct MvNormal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl MvNormal {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(EigError::Dimension {
                what: "normal covariance",
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if !linalg::is_symmetric(&cov, 1e-12) {
            return Err(EigError::InvalidConfig(
                "normal covariance is not symmetric".into(),
            ));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(EigError::NotPositiveDefinite {
                what: "normal covariance",
            })?;
        let precision = chol.inverse();
        let d = mean.len() as f64;
        let log_norm = -0.5 * d * (2.0 * PI).ln() - 0.5 * linalg::log_det(&chol);
        Ok(Self {
            mean,
            cov,
            chol,
            precision,
            log_norm,
        })
    }

    /// Independent coordinates with the given variances.
    pub fn diagonal(mean: &[f64], variances: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

impl fmt::Debug for MvNormal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MvNormal")
            .field("mean", &self.mean.as_slice())
            .field("cov", &self.cov)
            .finish()
    }
}

/// A prior factor from one of the supported families.
#[derive(Clone, Debug)]
pub enum Distribution {
    Normal(MvNormal),
    /// Independent coordinates with `log x_i ~ N(log_mean_i, log_var_i)`.
    LogNormal {
        log_mean: Vec<f64>,
        log_var: Vec<f64>,
    },
    /// Independent uniform coordinates on `[lower_i, upper_i]`.
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

impl Distribution {
    pub fn normal(mean: &[f64], variances: &[f64]) -> Result<Self> {
        Ok(Self::Normal(MvNormal::diagonal(mean, variances)?))
    }

    pub fn lognormal(log_mean: &[f64], log_var: &[f64]) -> Result<Self> {
        if log_mean.len() != log_var.len() {
            return Err(EigError::Dimension {
                what: "lognormal variances",
                expected: log_mean.len(),
                got: log_var.len(),
            });
        }
        if log_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(EigError::InvalidConfig(
                "lognormal variances must be positive".into(),
            ));
        }
        Ok(Self::LogNormal {
            log_mean: log_mean.to_vec(),
            log_var: log_var.to_vec(),
        })
    }

    pub fn uniform(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(EigError::Dimension {
                what: "uniform upper bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
            return Err(EigError::InvalidConfig(
                "uniform bounds need lower < upper".into(),
            ));
        }
        Ok(Self::Uniform {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        })
    }

    /// Zero-dimensional factor, used when a model has no nuisance parameters.
    pub fn empty() -> Self {
        Self::Normal(MvNormal::diagonal(&[], &[]).expect("empty normal is valid"))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Normal(n) => n.mean.len(),
            Self::LogNormal { log_mean, .. } => log_mean.len(),
            Self::Uniform { lower, .. } => lower.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Normal(n) => {
                let z = DVector::from_fn(n.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                &n.mean + n.chol.l() * z
            }
            Self::LogNormal { log_mean, log_var } => DVector::from_fn(log_mean.len(), |i, _| {
                let z: f64 = rng.sample(StandardNormal);
                (log_mean[i] + log_var[i].sqrt() * z).exp()
            }),
            Self::Uniform { lower, upper } => {
                DVector::from_fn(lower.len(), |i, _| rng.random_range(lower[i]..=upper[i]))
            }
        }
    }

    /// Mean (normal), median (lognormal) or midpoint (uniform).
    pub fn center(&self) -> DVector<f64> {
        match self {
            Self::Normal(n) => n.mean.clone(),
            Self::LogNormal { log_mean, .. } => {
                DVector::from_iterator(log_mean.len(), log_mean.iter().map(|m| m.exp()))
            }
            Self::Uniform { lower, upper } => {
                DVector::from_fn(lower.len(), |i, _| 0.5 * (lower[i] + upper[i]))
            }
        }
    }

    pub fn in_support(&self, x: &[f64]) -> bool {
        match self {
            Self::Normal(_) => x.iter().all(|v| v.is_finite()),
            Self::LogNormal { .. } => x.iter().all(|&v| v > 0.0 && v.is_finite()),
            Self::Uniform { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&v, (&l, &u))| v >= l && v <= u),
        }
    }

    /// Box for MAP solves: the uniform support shrunk by [`BOX_SHRINK`] per side.
    pub fn solver_bounds(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            Self::Uniform { lower, upper } => Some(
                lower
                    .iter()
                    .zip(upper)
                    .map(|(&l, &u)| (l + BOX_SHRINK, u - BOX_SHRINK))
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            Self::Normal(n) => {
                let diff = DVector::from_column_slice(x) - &n.mean;
                let w = linalg::solve_lower(&n.chol, &diff);
                n.log_norm - 0.5 * w.norm_squared()
            }
            Self::LogNormal { log_mean, log_var } => {
                if !self.in_support(x) {
                    return f64::NEG_INFINITY;
                }
                x.iter()
                    .zip(log_mean.iter().zip(log_var))
                    .map(|(&xi, (&mu, &var))| {
                        let lx = xi.ln();
                        -(lx + 0.5 * (2.0 * PI * var).ln() + (lx - mu).powi(2) / (2.0 * var))
                    })
                    .sum()
            }
            Self::Uniform { lower, upper } => {
                if self.in_support(x) {
                    -lower
                        .iter()
                        .zip(upper)
                        .map(|(l, u)| (u - l).ln())
                        .sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn grad_log_density(&self, x: &[f64]) -> DVector<f64> {
        match self {
            Self::Normal(n) => {
                let diff = DVector::from_column_slice(x) - &n.mean;
                -(&n.precision * diff)
            }
            Self::LogNormal { log_mean, log_var } => DVector::from_fn(x.len(), |i, _| {
                let lx = x[i].ln();
                -(1.0 + (lx - log_mean[i]) / log_var[i]) / x[i]
            }),
            Self::Uniform { .. } => DVector::zeros(x.len()),
        }
    }

    pub fn hess_log_density(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            Self::Normal(n) => -n.precision.clone(),
            Self::LogNormal { log_mean, log_var } => {
                DMatrix::from_diagonal(&DVector::from_fn(x.len(), |i, _| {
                    let lx = x[i].ln();
                    (1.0 + (lx - log_mean[i]) / log_var[i] - 1.0 / log_var[i]) / (x[i] * x[i])
                }))
            }
            Self::Uniform { .. } => DMatrix::zeros(x.len(), x.len()),
        }
    }
}

/// Builds the φ-factor for a given θ.
pub type ConditionalFactor = Arc<dyn Fn(&[f64]) -> Distribution + Send + Sync>;

#[derive(Clone)]
pub enum PhiFactor {
    Independent(Distribution),
    Conditional {
        dim: usize,
        factor: ConditionalFactor,
    },
}

impl PhiFactor {
    pub fn dim(&self) -> usize {
        match self {
            Self::Independent(d) => d.dim(),
            Self::Conditional { dim, .. } => *dim,
        }
    }

    pub fn given(&self, theta: &[f64]) -> std::borrow::Cow<'_, Distribution> {
        match self {
            Self::Independent(d) => std::borrow::Cow::Borrowed(d),
            Self::Conditional { factor, .. } => std::borrow::Cow::Owned(factor(theta)),
        }
    }

    fn is_conditional(&self) -> bool {
        matches!(self, Self::Conditional { .. })
    }
}

impl fmt::Debug for PhiFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Independent(d) => f.debug_tuple("Independent").field(d).finish(),
            Self::Conditional { dim, .. } => {
                f.debug_struct("Conditional").field("dim", dim).finish()
            }
        }
    }
}

/// Joint prior `π(θ, φ) = π(θ) π(φ | θ)`.
#[derive(Clone, Debug)]
pub struct PriorSpec {
    pub theta: Distribution,
    pub phi: PhiFactor,
}

impl PriorSpec {
    pub fn independent(theta: Distribution, phi: Distribution) -> Self {
        Self {
            theta,
            phi: PhiFactor::Independent(phi),
        }
    }

    pub fn without_nuisance(theta: Distribution) -> Self {
        Self::independent(theta, Distribution::empty())
    }

    pub fn d_theta(&self) -> usize {
        self.theta.dim()
    }

    pub fn d_phi(&self) -> usize {
        self.phi.dim()
    }

    /// Draws `θ ~ π(θ)` and then `φ ~ π(φ | θ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let theta = self.theta.sample(rng);
        let phi = self.phi.given(theta.as_slice()).sample(rng);
        (theta, phi)
    }

    pub fn sample_phi<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> DVector<f64> {
        self.phi.given(theta).sample(rng)
    }

    pub fn log_phi_given_theta(&self, theta: &[f64], phi: &[f64]) -> f64 {
        self.phi.given(theta).log_density(phi)
    }

    /// `log π(θ) + log π(φ | θ)`; `-∞` outside the support.
    pub fn log_joint(&self, theta: &[f64], phi: &[f64]) -> f64 {
        let lt = self.theta.log_density(theta);
        if lt == f64::NEG_INFINITY {
            return lt;
        }
        lt + self.log_phi_given_theta(theta, phi)
    }

    /// Gradient of `log π(θ, φ)` with respect to `z = (θ, φ)`.
    pub fn grad_log_joint(&self, theta: &[f64], phi: &[f64]) -> DVector<f64> {
        let (dt, dp) = (theta.len(), phi.len());
        let mut g = DVector::zeros(dt + dp);
        g.rows_mut(0, dt)
            .copy_from(&self.theta.grad_log_density(theta));
        g.rows_mut(dt, dp)
            .copy_from(&self.phi.given(theta).grad_log_density(phi));
        if self.phi.is_conditional() {
            let cross = self.fd_theta_grad_of_phi_factor(theta, phi);
            let mut head = g.rows_mut(0, dt);
            head += cross;
        }
        g
    }

    /// Hessian of `log π(θ, φ)` with respect to `z = (θ, φ)`.
    pub fn hess_log_joint(&self, theta: &[f64], phi: &[f64]) -> DMatrix<f64> {
        let (dt, dp) = (theta.len(), phi.len());
        let mut h = DMatrix::zeros(dt + dp, dt + dp);
        h.view_mut((0, 0), (dt, dt))
            .copy_from(&self.theta.hess_log_density(theta));
        h.view_mut((dt, dt), (dp, dp))
            .copy_from(&self.phi.given(theta).hess_log_density(phi));
        if self.phi.is_conditional() {
            // θθ and θφ blocks of log π(φ|θ) by central differences of its
            // gradient in z.
            let n = dt + dp;
            let mut cols = DMatrix::zeros(n, dt);
            for j in 0..dt {
                let step = crate::model::fd_step(theta[j]);
                let mut tp = theta.to_vec();
                let mut tm = theta.to_vec();
                tp[j] += step;
                tm[j] -= step;
                let gp = self.grad_phi_factor_z(&tp, phi);
                let gm = self.grad_phi_factor_z(&tm, phi);
                cols.set_column(j, &((gp - gm) / (2.0 * step)));
            }
            for j in 0..dt {
                for i in 0..n {
                    if i < dt {
                        h[(i, j)] += 0.5 * (cols[(i, j)] + cols[(j, i)]);
                    } else {
                        h[(i, j)] += cols[(i, j)];
                        h[(j, i)] += cols[(i, j)];
                    }
                }
            }
        }
        h
    }

    fn grad_phi_factor_z(&self, theta: &[f64], phi: &[f64]) -> DVector<f64> {
        let (dt, dp) = (theta.len(), phi.len());
        let mut g = DVector::zeros(dt + dp);
        g.rows_mut(0, dt)
            .copy_from(&self.fd_theta_grad_of_phi_factor(theta, phi));
        g.rows_mut(dt, dp)
            .copy_from(&self.phi.given(theta).grad_log_density(phi));
        g
    }

    fn fd_theta_grad_of_phi_factor(&self, theta: &[f64], phi: &[f64]) -> DVector<f64> {
        DVector::from_fn(theta.len(), |j, _| {
            let step = crate::model::fd_step(theta[j]);
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += step;
            tm[j] -= step;
            (self.log_phi_given_theta(&tp, phi) - self.log_phi_given_theta(&tm, phi)) / (2.0 * step)
        })
    }
}
