//! Experiment abstraction: forward map, Gaussian observation noise and the
//! likelihood and data-sampling primitives.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EigError, Result};
use crate::linalg;

/// Central-difference step `cbrt(eps) · max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Deterministic forward map `g(ξ, θ, φ)`.
///
/// Jacobians default to `None`, in which case [`ExperimentModel`] falls back
/// to central finite differences.
pub trait ForwardModel: Send + Sync {
    fn d_y(&self) -> usize;
    fn d_theta(&self) -> usize;
    fn d_phi(&self) -> usize;
    fn d_xi(&self) -> usize;

    fn eval(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> DVector<f64>;

    fn jac_theta(&self, _xi: &[f64], _theta: &[f64], _phi: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn jac_phi(&self, _xi: &[f64], _theta: &[f64], _phi: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂²g_k/∂φ²` for every output `k`. Only needed for full (non
    /// Gauss-Newton) nuisance Hessians.
    fn hess_phi(&self, _xi: &[f64], _theta: &[f64], _phi: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        None
    }
}

/// Mesh parameter `h` of an approximate forward model together with its weak
/// rate `η` and work rate `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discretization {
    pub h: f64,
    pub eta: f64,
    pub gamma: f64,
}

impl Discretization {
    /// Cost of one forward evaluation, `h^-γ`.
    pub fn work_factor(&self) -> f64 {
        self.h.powf(-self.gamma)
    }
}

/// Observations `Y = (y_1, …, y_Ne)` collected at design `ξ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub design: DVector<f64>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, design: DVector<f64>) -> Result<Self> {
        if y.iter().chain(design.iter()).any(|v| !v.is_finite()) {
            return Err(EigError::InvalidConfig(
                "dataset contains non-finite entries".into(),
            ));
        }
        Ok(Self { y, design })
    }

    pub fn n_e(&self) -> usize {
        self.y.ncols()
    }
}

/// Data summarized in noise-whitened coordinates.
///
/// With `L Lᵀ = Σ_ε` and `w_i = L⁻¹ y_i`, the likelihood quadratic form is
/// `N_e ‖w̄ − L⁻¹g‖² + Σ_i ‖w_i − w̄‖²`.
#[derive(Clone, Debug)]
pub struct WhitenedData {
    pub mean: DVector<f64>,
    pub scatter: f64,
    pub n_e: usize,
}

#[derive(Clone)]
pub struct ExperimentModel {
    forward: Arc<dyn ForwardModel>,
    noise_cov: DMatrix<f64>,
    noise_chol: Cholesky<f64, Dyn>,
    noise_log_det: f64,
    n_e: usize,
    discretization: Option<Discretization>,
}

impl fmt::Debug for ExperimentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperimentModel")
            .field("d_y", &self.d_y())
            .field("d_theta", &self.d_theta())
            .field("d_phi", &self.d_phi())
            .field("d_xi", &self.d_xi())
            .field("n_e", &self.n_e)
            .field("discretization", &self.discretization)
            .finish()
    }
}

impl ExperimentModel {
    pub fn new(
        forward: Arc<dyn ForwardModel>,
        noise_cov: DMatrix<f64>,
        n_e: usize,
    ) -> Result<Self> {
        let d_y = forward.d_y();
        if noise_cov.nrows() != d_y || noise_cov.ncols() != d_y {
            return Err(EigError::Dimension {
                what: "noise covariance",
                expected: d_y,
                got: noise_cov.nrows(),
            });
        }
        if n_e == 0 {
            return Err(EigError::InvalidConfig(
                "repetition count N_e must be positive".into(),
            ));
        }
        if !linalg::is_symmetric(&noise_cov, 1e-12) {
            return Err(EigError::InvalidConfig(
                "noise covariance is not symmetric".into(),
            ));
        }
        let noise_chol = noise_cov
            .clone()
            .cholesky()
            .ok_or(EigError::NotPositiveDefinite {
                what: "noise covariance",
            })?;
        let noise_log_det = linalg::log_det(&noise_chol);
        Ok(Self {
            forward,
            noise_cov,
            noise_chol,
            noise_log_det,
            n_e,
            discretization: None,
        })
    }

    pub fn with_discretization(mut self, disc: Discretization) -> Self {
        self.discretization = Some(disc);
        self
    }

    pub fn d_y(&self) -> usize {
        self.forward.d_y()
    }

    pub fn d_theta(&self) -> usize {
        self.forward.d_theta()
    }

    pub fn d_phi(&self) -> usize {
        self.forward.d_phi()
    }

    pub fn d_xi(&self) -> usize {
        self.forward.d_xi()
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn noise_chol(&self) -> &Cholesky<f64, Dyn> {
        &self.noise_chol
    }

    pub fn discretization(&self) -> Option<Discretization> {
        self.discretization
    }

    pub fn forward_model(&self) -> &Arc<dyn ForwardModel> {
        &self.forward
    }

    /// Work of one forward evaluation in abstract units.
    pub fn work_factor(&self) -> f64 {
        self.discretization.map_or(1.0, |d| d.work_factor())
    }

    pub fn check_design(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.d_xi() {
            return Err(EigError::Dimension {
                what: "design",
                expected: self.d_xi(),
                got: xi.len(),
            });
        }
        Ok(())
    }

    /// `g(ξ, θ, φ)`, rejecting non-finite output.
    pub fn eval(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DVector<f64>> {
        let g = self.forward.eval(xi, theta, phi);
        if g.len() != self.d_y() {
            return Err(EigError::Dimension {
                what: "forward output",
                expected: self.d_y(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta, phi));
        }
        Ok(g)
    }

    /// `L⁻¹ g(ξ, θ, φ)`.
    pub fn eval_whitened(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DVector<f64>> {
        Ok(linalg::solve_lower(
            &self.noise_chol,
            &self.eval(xi, theta, phi)?,
        ))
    }

    pub fn residual(
        &self,
        y: &DVector<f64>,
        xi: &[f64],
        theta: &[f64],
        phi: &[f64],
    ) -> Result<DVector<f64>> {
        Ok(y - self.eval(xi, theta, phi)?)
    }

    /// Draws `N_e` observations `y_i = g + ε_i`, `ε_i ~ N(0, Σ_ε)`.
    pub fn sample_data<R: Rng + ?Sized>(
        &self,
        xi: &[f64],
        theta: &[f64],
        phi: &[f64],
        rng: &mut R,
    ) -> Result<Dataset> {
        let g = self.eval(xi, theta, phi)?;
        let l = self.noise_chol.l();
        let mut y = DMatrix::zeros(self.d_y(), self.n_e);
        for mut col in y.column_iter_mut() {
            let z = DVector::from_fn(self.d_y(), |_, _| rng.sample::<f64, _>(StandardNormal));
            col.copy_from(&(&g + &l * z));
        }
        Ok(Dataset {
            y,
            design: DVector::from_column_slice(xi),
        })
    }

    pub fn whiten(&self, data: &Dataset) -> WhitenedData {
        let n_e = data.n_e();
        let mut mean = DVector::zeros(self.d_y());
        let cols: Vec<DVector<f64>> = data
            .y
            .column_iter()
            .map(|c| linalg::solve_lower(&self.noise_chol, &c.into_owned()))
            .collect();
        for w in &cols {
            mean += w;
        }
        mean /= n_e as f64;
        let scatter = cols.iter().map(|w| (w - &mean).norm_squared()).sum();
        WhitenedData { mean, scatter, n_e }
    }

    /// `-(N_e/2) log det(2π Σ_ε)`.
    pub fn log_norm_const(&self) -> f64 {
        -0.5 * self.n_e as f64 * (self.d_y() as f64 * (2.0 * PI).ln() + self.noise_log_det)
    }

    /// `log p(Y | θ, φ)` evaluated column by column.
    pub fn log_likelihood(&self, data: &Dataset, theta: &[f64], phi: &[f64]) -> Result<f64> {
        if data.n_e() != self.n_e {
            return Err(EigError::Dimension {
                what: "dataset columns",
                expected: self.n_e,
                got: data.n_e(),
            });
        }
        let g = self.eval(data.design.as_slice(), theta, phi)?;
        let quad: f64 = data
            .y
            .column_iter()
            .map(|c| linalg::solve_lower(&self.noise_chol, &(c - &g)).norm_squared())
            .sum();
        Ok(self.log_norm_const() - 0.5 * quad)
    }

    /// Same as [`Self::log_likelihood`] from pre-whitened data.
    pub fn log_likelihood_whitened(
        &self,
        data: &WhitenedData,
        xi: &[f64],
        theta: &[f64],
        phi: &[f64],
    ) -> Result<f64> {
        let wg = self.eval_whitened(xi, theta, phi)?;
        let quad = data.n_e as f64 * (&data.mean - wg).norm_squared() + data.scatter;
        Ok(self.log_norm_const() - 0.5 * quad)
    }

    pub fn jac_theta(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        match self.forward.jac_theta(xi, theta, phi) {
            Some(j) => check_jacobian(j, theta, phi),
            None => self.jac_theta_fd(xi, theta, phi),
        }
    }

    pub fn jac_phi(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        match self.forward.jac_phi(xi, theta, phi) {
            Some(j) => check_jacobian(j, theta, phi),
            None => self.jac_phi_fd(xi, theta, phi),
        }
    }

    /// `[∇_θ g, ∇_φ g]`.
    pub fn jac_z(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        let jt = self.jac_theta(xi, theta, phi)?;
        let jp = self.jac_phi(xi, theta, phi)?;
        Ok(hstack(&jt, &jp))
    }

    pub fn hess_phi(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        self.forward.hess_phi(xi, theta, phi)
    }

    pub fn jac_theta_fd(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        central_diff(self.d_y(), theta, |t| self.eval(xi, t, phi))
    }

    pub fn jac_phi_fd(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        central_diff(self.d_y(), phi, |p| self.eval(xi, theta, p))
    }

    pub fn jac_z_fd(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        Ok(hstack(
            &self.jac_theta_fd(xi, theta, phi)?,
            &self.jac_phi_fd(xi, theta, phi)?,
        ))
    }
}

fn non_finite(theta: &[f64], phi: &[f64]) -> EigError {
    EigError::NonFiniteForward {
        theta: theta.to_vec(),
        phi: phi.to_vec(),
    }
}

fn check_jacobian(j: DMatrix<f64>, theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
    if j.iter().all(|v| v.is_finite()) {
        Ok(j)
    } else {
        Err(non_finite(theta, phi))
    }
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

fn central_diff<F>(rows: usize, x: &[f64], f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        let step = fd_step(x[j]);
        probe[j] = x[j] + step;
        let fp = f(&probe)?;
        probe[j] = x[j] - step;
        let fm = f(&probe)?;
        probe[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    Ok(jac)
}

/// Forward map given by a closure, without analytic Jacobians.
pub struct FnForward<F> {
    pub dims: [usize; 4],
    pub f: F,
}

impl<F> FnForward<F>
where
    F: Fn(&[f64], &[f64], &[f64]) -> DVector<f64> + Send + Sync,
{
    /// `dims` is `[d_y, d_theta, d_phi, d_xi]`.
    pub fn new(dims: [usize; 4], f: F) -> Self {
        Self { dims, f }
    }
}

impl<F> ForwardModel for FnForward<F>
where
    F: Fn(&[f64], &[f64], &[f64]) -> DVector<f64> + Send + Sync,
{
    fn d_y(&self) -> usize {
        self.dims[0]
    }
    fn d_theta(&self) -> usize {
        self.dims[1]
    }
    fn d_phi(&self) -> usize {
        self.dims[2]
    }
    fn d_xi(&self) -> usize {
        self.dims[3]
    }
    fn eval(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> DVector<f64> {
        (self.f)(xi, theta, phi)
    }
}
