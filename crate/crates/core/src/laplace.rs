//! MAP solves and Gaussian (Laplace) fits.
//!
//! Three fits are provided, all conditioned on one dataset:
//!
//! * [`Posterior::fit_nuisance_map`]: `φ̂(θ)` minimizing
//!   `f(θ, φ) = ½ Σ_i r_iᵀ Σ_ε⁻¹ r_i − log π(φ | θ)`,
//! * [`Posterior::fit_theta_map`]: `θ̂` minimizing the marginalized objective
//!   `F(θ) = f(θ, φ̂(θ)) − log π(θ) + ½ log det ∇φ∇φ f(θ, φ̂(θ))`,
//! * [`Posterior::fit_joint_map`]: `ẑ = (θ̂, φ̂)` of the joint posterior.
//!
//! All residual algebra is done in noise-whitened coordinates, where the
//! misfit is `½ ‖r̃‖² + ½ s` with `r̃ = √N_e (w̄ − L⁻¹ g)` and `s` the
//! within-sample scatter.

use std::cell::RefCell;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EigError, Result};
use crate::linalg;
use crate::model::{fd_step, Dataset, ExperimentModel, WhitenedData};
use crate::optim::{self, BfgsOptions, Minimum, Objective};
use crate::prior::PriorSpec;
use crate::rng::Substreams;

/// How Hessians of `f` with respect to `φ` are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianForm {
    /// `N_e Jᵀ Σ_ε⁻¹ J − ∇² log π`, dropping second derivatives of `g`.
    #[default]
    GaussNewton,
    /// Adds the residual-weighted `∂²g/∂φ²` term when the forward model
    /// supplies it; falls back to Gauss-Newton otherwise.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Gradient tolerance, scaled by `1 + |objective(start)|`.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub n_multistarts: usize,
    pub hessian: HessianForm,
    /// Newton steps on the curvature model after BFGS terminates.
    pub polish_steps: usize,
    /// Seed for the prior draws used as extra starting points.
    pub multistart_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 200,
            n_multistarts: 3,
            hessian: HessianForm::GaussNewton,
            polish_steps: 4,
            multistart_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(EigError::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.max_iters == 0 || self.n_multistarts == 0 {
            return Err(EigError::InvalidConfig(
                "max_iters and n_multistarts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The same configuration with fresh multistart draws.
    pub fn retry(&self, attempt: u64) -> Self {
        Self {
            multistart_seed: self
                .multistart_seed
                .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(attempt + 1)),
            ..self.clone()
        }
    }
}

/// Gaussian approximation `N(mode, precision⁻¹)`.
#[derive(Clone, Debug)]
pub struct LaplaceFit {
    pub mode: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub log_det_precision: f64,
    pub grad_norm_at_mode: f64,
    pub iterations: usize,
    pub jitter_added: f64,
    /// Objective value at the mode.
    pub value: f64,
    /// `φ̂(θ̂)` for fits over `θ`.
    pub nuisance_mode: Option<DVector<f64>>,
    chol: Cholesky<f64, Dyn>,
    chol_l: DMatrix<f64>,
}

impl LaplaceFit {
    fn new(
        mode: DVector<f64>,
        precision: &DMatrix<f64>,
        what: &'static str,
        min: &Minimum,
    ) -> Result<Self> {
        let (precision, chol, jitter) = linalg::cholesky_with_jitter(precision, what)?;
        Ok(Self {
            mode,
            log_det_precision: linalg::log_det(&chol),
            precision,
            grad_norm_at_mode: min.grad_norm,
            iterations: min.iterations,
            jitter_added: jitter,
            value: min.value,
            nuisance_mode: None,
            chol_l: chol.l(),
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mode;
        let q = (self.chol_l.transpose() * diff).norm_squared();
        0.5 * self.log_det_precision - 0.5 * self.dim() as f64 * (2.0 * PI).ln() - 0.5 * q
    }

    /// `mode + L⁻ᵀ η` with `η` standard normal and `L Lᵀ` the precision.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eta = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mode + linalg::solve_upper_transpose(&self.chol, &eta)
    }
}

pub fn laplace_log_density(fit: &LaplaceFit, x: &[f64]) -> f64 {
    fit.log_density(x)
}

pub fn sample_laplace<R: Rng + ?Sized>(fit: &LaplaceFit, rng: &mut R) -> DVector<f64> {
    fit.sample(rng)
}

/// A dataset bound to its model and prior; the home of every MAP solve.
pub struct Posterior<'a> {
    pub model: &'a ExperimentModel,
    pub prior: &'a PriorSpec,
    pub xi: DVector<f64>,
    pub data: WhitenedData,
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a ExperimentModel, prior: &'a PriorSpec, data: &Dataset) -> Result<Self> {
        model.check_design(data.design.as_slice())?;
        if data.y.nrows() != model.d_y() || data.n_e() != model.n_e() {
            return Err(EigError::Dimension {
                what: "dataset",
                expected: model.d_y() * model.n_e(),
                got: data.y.len(),
            });
        }
        if prior.d_theta() != model.d_theta() || prior.d_phi() != model.d_phi() {
            return Err(EigError::Dimension {
                what: "prior",
                expected: model.d_theta() + model.d_phi(),
                got: prior.d_theta() + prior.d_phi(),
            });
        }
        Ok(Self {
            model,
            prior,
            xi: data.design.clone(),
            data: model.whiten(data),
        })
    }

    fn sqrt_ne(&self) -> f64 {
        (self.data.n_e as f64).sqrt()
    }

    /// Whitened residual `r̃` and misfit `½ Σ_i r_iᵀ Σ_ε⁻¹ r_i`.
    fn residual(&self, theta: &[f64], phi: &[f64]) -> Result<(DVector<f64>, f64)> {
        let wg = self.model.eval_whitened(self.xi.as_slice(), theta, phi)?;
        let r = (&self.data.mean - wg) * self.sqrt_ne();
        let misfit = 0.5 * (r.norm_squared() + self.data.scatter);
        Ok((r, misfit))
    }

    fn whiten_jac(&self, j: DMatrix<f64>) -> DMatrix<f64> {
        let lj = self
            .model
            .noise_chol()
            .l_dirty()
            .solve_lower_triangular(&j)
            .expect("noise factor has a non-zero diagonal");
        lj * self.sqrt_ne()
    }

    fn jac_phi_w(&self, theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.whiten_jac(self.model.jac_phi(self.xi.as_slice(), theta, phi)?))
    }

    fn jac_z_w(&self, theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.whiten_jac(self.model.jac_z(self.xi.as_slice(), theta, phi)?))
    }

    /// `½ Σ_i r_iᵀ Σ_ε⁻¹ r_i` at `(θ, φ)`.
    pub fn misfit(&self, theta: &[f64], phi: &[f64]) -> Result<f64> {
        Ok(self.residual(theta, phi)?.1)
    }

    /// `f(θ, φ)`; `+∞` outside the support of `π(φ | θ)`.
    pub fn eval_f(&self, theta: &[f64], phi: &[f64]) -> Result<f64> {
        let lp = self.prior.log_phi_given_theta(theta, phi);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        Ok(self.misfit(theta, phi)? - lp)
    }

    pub fn grad_f_phi(&self, theta: &[f64], phi: &[f64]) -> Result<DVector<f64>> {
        let (r, _) = self.residual(theta, phi)?;
        let j = self.jac_phi_w(theta, phi)?;
        Ok(-(j.transpose() * r) - self.prior.phi.given(theta).grad_log_density(phi))
    }

    pub fn hess_f_phi(
        &self,
        theta: &[f64],
        phi: &[f64],
        form: HessianForm,
    ) -> Result<DMatrix<f64>> {
        let j = self.jac_phi_w(theta, phi)?;
        let mut h = j.transpose() * &j - self.prior.phi.given(theta).hess_log_density(phi);
        if form == HessianForm::Full {
            if let Some(second) = self.model.hess_phi(self.xi.as_slice(), theta, phi) {
                let (r, _) = self.residual(theta, phi)?;
                // ∇²(½‖r̃‖²) gains Σ_k r̃_k ∇²r̃_k = −√N_e Σ_j (L⁻ᵀ r̃)_j ∇²g_j.
                let u = linalg::solve_upper_transpose(self.model.noise_chol(), &r) * self.sqrt_ne();
                for (uj, gj) in u.iter().zip(&second) {
                    h -= gj * *uj;
                }
            }
        }
        Ok(h)
    }

    /// `½ Σ r_iᵀ Σ_ε⁻¹ r_i − log π(θ, φ)`; `+∞` outside the prior support.
    pub fn eval_joint(&self, theta: &[f64], phi: &[f64]) -> Result<f64> {
        let lp = self.prior.log_joint(theta, phi);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        Ok(self.misfit(theta, phi)? - lp)
    }

    fn grad_joint(&self, theta: &[f64], phi: &[f64]) -> Result<DVector<f64>> {
        let (r, _) = self.residual(theta, phi)?;
        let j = self.jac_z_w(theta, phi)?;
        Ok(-(j.transpose() * r) - self.prior.grad_log_joint(theta, phi))
    }

    /// Gauss-Newton Hessian of the joint objective.
    pub fn hess_joint_gn(&self, theta: &[f64], phi: &[f64]) -> Result<DMatrix<f64>> {
        let j = self.jac_z_w(theta, phi)?;
        Ok(j.transpose() * &j - self.prior.hess_log_joint(theta, phi))
    }

    fn phi_bounds(&self, theta: &[f64]) -> Option<Vec<(f64, f64)>> {
        self.prior.phi.given(theta).solver_bounds()
    }

    fn joint_bounds(&self) -> Option<Vec<(f64, f64)>> {
        let center = self.prior.theta.center();
        let tb = self.prior.theta.solver_bounds();
        let pb = self.phi_bounds(center.as_slice());
        if tb.is_none() && pb.is_none() {
            return None;
        }
        let free = (f64::NEG_INFINITY, f64::INFINITY);
        let mut b = tb.unwrap_or_else(|| vec![free; self.prior.d_theta()]);
        b.extend(pb.unwrap_or_else(|| vec![free; self.prior.d_phi()]));
        Some(b)
    }

    /// `φ̂(θ)` and the Laplace fit of `π(φ | Y, θ)`.
    ///
    /// `warm` is tried first; the multistart runs only if it fails.
    pub fn fit_nuisance_map(
        &self,
        theta: &[f64],
        cfg: &SolverConfig,
        warm: Option<&DVector<f64>>,
    ) -> Result<LaplaceFit> {
        let obj = NuisanceObjective {
            post: self,
            theta,
            form: cfg.hessian,
        };
        let bounds = self.phi_bounds(theta);
        let min = if let Some(w) = warm.filter(|w| w.len() == self.prior.d_phi()) {
            match best_of(&obj, std::slice::from_ref(w), bounds.as_deref(), cfg) {
                Ok(m) => m,
                Err(_) => best_of(
                    &obj,
                    &self.nuisance_starts(theta, cfg),
                    bounds.as_deref(),
                    cfg,
                )?,
            }
        } else {
            best_of(
                &obj,
                &self.nuisance_starts(theta, cfg),
                bounds.as_deref(),
                cfg,
            )
            .map_err(|e| rename(e, "nuisance MAP"))?
        };
        let h = self.hess_f_phi(theta, min.x.as_slice(), cfg.hessian)?;
        LaplaceFit::new(min.x.clone(), &h, "nuisance precision", &min)
    }

    fn nuisance_starts(&self, theta: &[f64], cfg: &SolverConfig) -> Vec<DVector<f64>> {
        let factor = self.prior.phi.given(theta);
        let mut rng = Substreams::new(cfg.multistart_seed).stream("nuisance-start", 0);
        let mut starts = vec![factor.center()];
        starts.extend((1..cfg.n_multistarts).map(|_| factor.sample(&mut rng)));
        starts
    }

    /// `log π(θ) + log π(φ̂|θ) + (d_φ/2) log 2π − ½ log det ∇φ∇φ f − ½ Σ r_iᵀ Σ_ε⁻¹ r_i`,
    /// all at `φ̂(θ)`.
    pub fn marginalized_log_posterior_unnorm(
        &self,
        theta: &[f64],
        cfg: &SolverConfig,
    ) -> Result<f64> {
        let profile = self.profile(theta, cfg, None)?;
        let lt = self.prior.theta.log_density(theta);
        Ok(lt - profile.value + 0.5 * self.prior.d_phi() as f64 * (2.0 * PI).ln())
    }

    /// `f(θ, φ̂) + k(θ)` and the pieces needed by the θ fit.
    fn profile(
        &self,
        theta: &[f64],
        cfg: &SolverConfig,
        warm: Option<&DVector<f64>>,
    ) -> Result<Profile> {
        let fit = self.fit_nuisance_map(theta, cfg, warm)?;
        let ell = self.prior.log_phi_given_theta(theta, fit.mode.as_slice());
        let k = 0.5 * fit.log_det_precision;
        Ok(Profile {
            value: fit.value + k,
            k_minus_ell: k - ell,
            phi: fit.mode,
        })
    }

    /// `θ̂` and the Laplace fit of the marginalized posterior of `θ`.
    ///
    /// `hint` is an extra starting point tried before the prior center.
    pub fn fit_theta_map(
        &self,
        cfg: &SolverConfig,
        hint: Option<&DVector<f64>>,
    ) -> Result<LaplaceFit> {
        let obj = ThetaObjective {
            post: self,
            cfg,
            warm: RefCell::new(None),
        };
        let bounds = self.prior.theta.solver_bounds();
        let mut rng = Substreams::new(cfg.multistart_seed).stream("theta-start", 0);
        let mut starts: Vec<DVector<f64>> = hint.into_iter().cloned().collect();
        starts.push(self.prior.theta.center());
        while starts.len() < cfg.n_multistarts.max(1 + hint.is_some() as usize) {
            starts.push(self.prior.theta.sample(&mut rng));
        }
        let min =
            best_of(&obj, &starts, bounds.as_deref(), cfg).map_err(|e| rename(e, "theta MAP"))?;
        let theta = min.x.clone();
        let center = self.profile(theta.as_slice(), cfg, obj.warm.borrow().as_ref())?;
        let precision = self.theta_precision(theta.as_slice(), &center, cfg)?;
        let mut fit = LaplaceFit::new(theta, &precision, "theta precision", &min)?;
        fit.nuisance_mode = Some(center.phi);
        Ok(fit)
    }

    fn theta_precision(
        &self,
        theta: &[f64],
        center: &Profile,
        cfg: &SolverConfig,
    ) -> Result<DMatrix<f64>> {
        let dt = theta.len();
        let dp = self.prior.d_phi();
        let warm = Some(&center.phi);
        let mut probe = theta.to_vec();

        // ∇θ φ̂ by central differences of re-solved inner MAPs.
        let mut dphi = DMatrix::zeros(dp, dt);
        for j in 0..dt {
            let s = fd_step(theta[j]);
            probe[j] = theta[j] + s;
            let up = self.fit_nuisance_map(&probe, cfg, warm)?.mode;
            probe[j] = theta[j] - s;
            let down = self.fit_nuisance_map(&probe, cfg, warm)?.mode;
            probe[j] = theta[j];
            dphi.set_column(j, &((up - down) / (2.0 * s)));
        }
        let mut t = DMatrix::zeros(dt + dp, dt);
        t.view_mut((0, 0), (dt, dt)).fill_with_identity();
        t.view_mut((dt, 0), (dp, dt)).copy_from(&dphi);
        let a = self.jac_z_w(theta, center.phi.as_slice())? * t;
        let mut p = a.transpose() * a - self.prior.theta.hess_log_density(theta);

        // ∇²(k − ℓ) by second differences of the scalar profile.
        if dp > 0 {
            let q = |x: &[f64]| self.profile(x, cfg, warm).map(|p| p.k_minus_ell);
            let q0 = center.k_minus_ell;
            let steps: Vec<f64> = theta.iter().map(|v| second_diff_step(*v)).collect();
            let mut qp = vec![0.0; dt];
            let mut qm = vec![0.0; dt];
            for i in 0..dt {
                probe[i] = theta[i] + steps[i];
                qp[i] = q(&probe)?;
                probe[i] = theta[i] - steps[i];
                qm[i] = q(&probe)?;
                probe[i] = theta[i];
                p[(i, i)] += (qp[i] - 2.0 * q0 + qm[i]) / (steps[i] * steps[i]);
            }
            for i in 0..dt {
                for j in 0..i {
                    let mut corner = |si: f64, sj: f64| {
                        probe[i] = theta[i] + si * steps[i];
                        probe[j] = theta[j] + sj * steps[j];
                        let v = q(&probe);
                        probe[i] = theta[i];
                        probe[j] = theta[j];
                        v
                    };
                    let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                        + corner(-1.0, -1.0)?)
                        / (4.0 * steps[i] * steps[j]);
                    p[(i, j)] += v;
                    p[(j, i)] += v;
                }
            }
        }
        Ok(p)
    }

    /// `ẑ` and the Laplace fit of `π(θ, φ | Y)`.
    pub fn fit_joint_map(
        &self,
        cfg: &SolverConfig,
        hint: Option<&DVector<f64>>,
    ) -> Result<LaplaceFit> {
        let obj = JointObjective { post: self };
        let bounds = self.joint_bounds();
        let mut rng = Substreams::new(cfg.multistart_seed).stream("joint-start", 0);
        let mut starts: Vec<DVector<f64>> = hint.into_iter().cloned().collect();
        let tc = self.prior.theta.center();
        let pc = self.prior.phi.given(tc.as_slice()).center();
        starts.push(stack(&tc, &pc));
        while starts.len() < cfg.n_multistarts.max(1 + hint.is_some() as usize) {
            let (t, p) = self.prior.sample(&mut rng);
            starts.push(stack(&t, &p));
        }
        let min =
            best_of(&obj, &starts, bounds.as_deref(), cfg).map_err(|e| rename(e, "joint MAP"))?;
        let (t, p) = self.split(&min.x);
        let h = self.hess_joint_gn(t, p)?;
        LaplaceFit::new(min.x.clone(), &h, "joint precision", &min)
    }

    pub fn split<'v>(&self, z: &'v DVector<f64>) -> (&'v [f64], &'v [f64]) {
        z.as_slice().split_at(self.prior.d_theta())
    }
}

/// Step `eps^(1/4) · max(1, |x|)` for second differences of noisy profiles.
fn second_diff_step(x: f64) -> f64 {
    f64::EPSILON.powf(0.25) * x.abs().max(1.0)
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn rename(e: EigError, what: &'static str) -> EigError {
    match e {
        EigError::NonConvergence {
            iterations,
            grad_norm,
            ..
        } => EigError::NonConvergence {
            what,
            iterations,
            grad_norm,
        },
        other => other,
    }
}

struct Profile {
    value: f64,
    k_minus_ell: f64,
    phi: DVector<f64>,
}

/// Runs BFGS from every start and keeps the lowest converged value.
fn best_of(
    obj: &dyn Objective,
    starts: &[DVector<f64>],
    bounds: Option<&[(f64, f64)]>,
    cfg: &SolverConfig,
) -> Result<Minimum> {
    let mut best: Option<Minimum> = None;
    let mut worst_failure: Option<Minimum> = None;
    for start in starts {
        let mut x0 = start.clone();
        optim::clamp(&mut x0, bounds);
        let f0 = obj.value(&x0);
        if !f0.is_finite() {
            continue;
        }
        let opts = BfgsOptions {
            grad_tol: cfg.grad_tol * (1.0 + f0.abs()),
            max_iters: cfg.max_iters,
            polish_steps: cfg.polish_steps,
        };
        let m = optim::minimize(obj, &x0, bounds, &opts);
        if m.converged {
            if best.as_ref().is_none_or(|b| m.value < b.value) {
                best = Some(m);
            }
        } else if worst_failure
            .as_ref()
            .is_none_or(|b| m.grad_norm < b.grad_norm)
        {
            worst_failure = Some(m);
        }
    }
    best.ok_or_else(|| {
        let (iterations, grad_norm) =
            worst_failure.map_or((0, f64::INFINITY), |m| (m.iterations, m.grad_norm));
        EigError::NonConvergence {
            what: "MAP",
            iterations,
            grad_norm,
        }
    })
}

struct NuisanceObjective<'p, 'a> {
    post: &'p Posterior<'a>,
    theta: &'p [f64],
    form: HessianForm,
}

impl Objective for NuisanceObjective<'_, '_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.post
            .eval_f(self.theta, x.as_slice())
            .unwrap_or(f64::INFINITY)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.post
            .grad_f_phi(self.theta, x.as_slice())
            .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN))
    }

    fn curvature(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.post
            .hess_f_phi(self.theta, x.as_slice(), self.form)
            .ok()
    }
}

struct JointObjective<'p, 'a> {
    post: &'p Posterior<'a>,
}

impl Objective for JointObjective<'_, '_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let (t, p) = self.post.split(x);
        self.post.eval_joint(t, p).unwrap_or(f64::INFINITY)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (t, p) = self.post.split(x);
        self.post
            .grad_joint(t, p)
            .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN))
    }

    fn curvature(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (t, p) = self.post.split(x);
        self.post.hess_joint_gn(t, p).ok()
    }
}

/// `F(θ)`, re-solving the nuisance MAP at every evaluation. The last mode
/// is kept as a warm start.
struct ThetaObjective<'p, 'a> {
    post: &'p Posterior<'a>,
    cfg: &'p SolverConfig,
    warm: RefCell<Option<DVector<f64>>>,
}

impl ThetaObjective<'_, '_> {
    fn eval(&self, theta: &[f64]) -> f64 {
        let h = self.post.prior.theta.log_density(theta);
        if h == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        let warm = self.warm.borrow().clone();
        match self.post.profile(theta, self.cfg, warm.as_ref()) {
            Ok(p) => {
                *self.warm.borrow_mut() = Some(p.phi);
                p.value - h
            }
            Err(_) => f64::INFINITY,
        }
    }
}

impl Objective for ThetaObjective<'_, '_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.eval(x.as_slice())
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut probe = x.as_slice().to_vec();
        DVector::from_fn(x.len(), |j, _| {
            let s = fd_step(x[j]);
            probe[j] = x[j] + s;
            let up = self.eval(&probe);
            probe[j] = x[j] - s;
            let down = self.eval(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * s)
        })
    }

    /// Schur complement of the joint Gauss-Newton Hessian at `(θ, φ̂(θ))`.
    fn curvature(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let phi = self.warm.borrow().clone()?;
        let dt = x.len();
        let dp = phi.len();
        let h = self.post.hess_joint_gn(x.as_slice(), phi.as_slice()).ok()?;
        let htt = h.view((0, 0), (dt, dt)).into_owned();
        if dp == 0 {
            return Some(htt);
        }
        let htp = h.view((0, dt), (dt, dp)).into_owned();
        let hpp = h.view((dt, dt), (dp, dp)).into_owned();
        let chol = hpp.cholesky()?;
        Some(&htt - &htp * chol.solve(&htp.transpose()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnForward;
    use crate::prior::Distribution;
    use std::sync::Arc;

    fn example1(xi: f64, n_e: usize) -> (ExperimentModel, PriorSpec) {
        let fwd = FnForward::new([2, 1, 1, 1], |x: &[f64], t: &[f64], p: &[f64]| {
            DVector::from_vec(vec![x[0] * t[0], (1.0 - x[0]) * p[0]])
        });
        let _ = xi;
        let model =
            ExperimentModel::new(Arc::new(fwd), DMatrix::identity(2, 2) * 1e-2, n_e).unwrap();
        let prior = PriorSpec::independent(
            Distribution::normal(&[0.0], &[1.0]).unwrap(),
            Distribution::normal(&[0.0], &[1e-2]).unwrap(),
        );
        (model, prior)
    }

    fn data(xi: f64, cols: &[[f64; 2]]) -> Dataset {
        let flat: Vec<f64> = cols.iter().flatten().copied().collect();
        Dataset::new(
            DMatrix::from_column_slice(2, cols.len(), &flat),
            DVector::from_element(1, xi),
        )
        .unwrap()
    }

    #[test]
    fn conjugate_nuisance_fit() {
        let (m, p) = example1(0.0, 1);
        let d = data(0.0, &[[0.0, 0.2]]);
        let post = Posterior::new(&m, &p, &d).unwrap();
        let fit = post
            .fit_nuisance_map(&[0.3], &SolverConfig::default(), None)
            .unwrap();
        assert!((fit.mode[0] - 0.1).abs() < 1e-10);
        assert!((fit.precision[(0, 0)] - 200.0).abs() < 1e-8);
        assert!(post.grad_f_phi(&[0.3], fit.mode.as_slice()).unwrap().amax() < 1e-10);

        let d0 = data(0.0, &[[0.0, 0.0]]);
        let post0 = Posterior::new(&m, &p, &d0).unwrap();
        let fit0 = post0
            .fit_nuisance_map(&[0.3], &SolverConfig::default(), None)
            .unwrap();
        assert!(fit0.mode[0].abs() < 1e-12);
    }

    #[test]
    fn f_decomposes_into_misfit_and_prior() {
        let (m, p) = example1(0.4, 2);
        let d = data(0.4, &[[0.1, -0.2], [0.3, 0.05]]);
        let post = Posterior::new(&m, &p, &d).unwrap();
        let f = post.eval_f(&[0.2], &[0.1]).unwrap();
        let misfit = post.misfit(&[0.2], &[0.1]).unwrap();
        assert!((f - misfit + p.log_phi_given_theta(&[0.2], &[0.1])).abs() < 1e-12);
    }

    // ξ=0.5, θ ~ N(0,1), y1 = θ/2 + ε: posterior precision 1 + N_e·0.25/0.01.
    #[test]
    fn conjugate_theta_fit() {
        let (m, p) = example1(0.5, 1);
        let d = data(0.5, &[[0.4, 0.05]]);
        let post = Posterior::new(&m, &p, &d).unwrap();
        let fit = post.fit_theta_map(&SolverConfig::default(), None).unwrap();
        let prec = 1.0 + 0.25 / 0.01;
        let mean = (0.5 * 0.4 / 0.01) / prec;
        assert!(
            (fit.mode[0] - mean).abs() < 1e-6,
            "{} vs {mean}",
            fit.mode[0]
        );
        assert!(
            (fit.precision[(0, 0)] - prec).abs() < 1e-6 * prec,
            "{}",
            fit.precision[(0, 0)]
        );
    }

    #[test]
    fn conjugate_joint_fit() {
        let (m, p) = example1(0.3, 1);
        let d = data(0.3, &[[0.4, 0.05]]);
        let post = Posterior::new(&m, &p, &d).unwrap();
        let fit = post.fit_joint_map(&SolverConfig::default(), None).unwrap();
        let pt = 1.0 + 0.09 / 0.01;
        let pp = 100.0 + 0.49 / 0.01;
        assert!((fit.mode[0] - 0.3 * 0.4 / 0.01 / pt).abs() < 1e-8);
        assert!((fit.mode[1] - 0.7 * 0.05 / 0.01 / pp).abs() < 1e-8);
        assert!((fit.precision[(0, 0)] - pt).abs() < 1e-8);
        assert!((fit.precision[(1, 1)] - pp).abs() < 1e-8);
        assert!(fit.precision[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn laplace_density_at_mode() {
        let (m, p) = example1(0.3, 1);
        let d = data(0.3, &[[0.4, 0.05]]);
        let post = Posterior::new(&m, &p, &d).unwrap();
        let fit = post.fit_joint_map(&SolverConfig::default(), None).unwrap();
        let at_mode = fit.log_density(fit.mode.as_slice());
        assert!((at_mode - (0.5 * fit.log_det_precision - (2.0 * PI).ln())).abs() < 1e-12);
    }
}
