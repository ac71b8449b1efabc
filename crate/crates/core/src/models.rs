//! Built-in example models and their analytic oracles.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EigError, Result};
use crate::model::{Discretization, ExperimentModel, ForwardModel};
use crate::prior::{Distribution, MvNormal, PriorSpec};

/// Linear Gaussian model `y_i = A θ + B φ + ε_i`.
#[derive(Clone, Debug)]
pub struct LinearGaussianSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub theta_mean: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
    pub phi_mean: DVector<f64>,
    pub phi_cov: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
    pub n_e: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InformationAbout {
    Theta,
    Joint,
}

const EX1_THETA_VAR: f64 = 1.0;
const EX1_PHI_VAR: f64 = 1e-2;
const EX1_NOISE_VAR: f64 = 1e-2;

impl LinearGaussianSpec {
    /// `g = (ξθ, (1−ξ)φ)`, `θ ~ N(0, 1)`, `φ ~ N(0, 10⁻²)`, `Σ_ε = 10⁻² I`.
    pub fn example1(xi: f64) -> Self {
        Self {
            a: DMatrix::from_column_slice(2, 1, &[xi, 0.0]),
            b: DMatrix::from_column_slice(2, 1, &[0.0, 1.0 - xi]),
            theta_mean: DVector::zeros(1),
            theta_cov: DMatrix::from_element(1, 1, EX1_THETA_VAR),
            phi_mean: DVector::zeros(1),
            phi_cov: DMatrix::from_element(1, 1, EX1_PHI_VAR),
            noise_cov: DMatrix::identity(2, 2) * EX1_NOISE_VAR,
            n_e: 1,
        }
    }

    /// Exact EIG in nats.
    ///
    /// The sample mean is sufficient for `(θ, φ)`, with noise `Σ_ε / N_e`.
    /// For `θ` alone, `φ` is folded into the effective noise `B Σ_φ Bᵀ + Σ_ε / N_e`.
    pub fn analytic_eig(&self, about: InformationAbout) -> Result<f64> {
        let noise = &self.noise_cov / self.n_e as f64;
        let (design, prior_cov, noise) = match about {
            InformationAbout::Theta => (
                self.a.clone(),
                self.theta_cov.clone(),
                &self.b * &self.phi_cov * self.b.transpose() + noise,
            ),
            InformationAbout::Joint => {
                let (dt, dp) = (self.a.ncols(), self.b.ncols());
                let mut c = DMatrix::zeros(self.a.nrows(), dt + dp);
                c.columns_mut(0, dt).copy_from(&self.a);
                c.columns_mut(dt, dp).copy_from(&self.b);
                let mut cov = DMatrix::zeros(dt + dp, dt + dp);
                cov.view_mut((0, 0), (dt, dt)).copy_from(&self.theta_cov);
                cov.view_mut((dt, dt), (dp, dp)).copy_from(&self.phi_cov);
                (c, cov, noise)
            }
        };
        let chol = noise.cholesky().ok_or(EigError::NotPositiveDefinite {
            what: "effective noise",
        })?;
        let d = prior_cov.nrows();
        let m = DMatrix::identity(d, d) + &prior_cov * design.transpose() * chol.solve(&design);
        // det(I + Σ Aᵀ N⁻¹ A) = det(I + S Aᵀ N⁻¹ A S) for S = Σ^{1/2}; use LU for the
        // non-symmetric product.
        let det = m.lu().determinant();
        if !(det > 0.0) {
            return Err(EigError::NotPositiveDefinite {
                what: "information matrix",
            });
        }
        Ok(0.5 * det.ln())
    }

    /// Model with the fixed maps `A`, `B` (no design dependence).
    pub fn build(&self) -> Result<(ExperimentModel, PriorSpec)> {
        let fwd = FixedLinear {
            a: self.a.clone(),
            b: self.b.clone(),
        };
        let model = ExperimentModel::new(Arc::new(fwd), self.noise_cov.clone(), self.n_e)?;
        let prior = PriorSpec::independent(
            Distribution::Normal(MvNormal::new(
                self.theta_mean.clone(),
                self.theta_cov.clone(),
            )?),
            Distribution::Normal(MvNormal::new(self.phi_mean.clone(), self.phi_cov.clone())?),
        );
        Ok((model, prior))
    }
}

struct FixedLinear {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl ForwardModel for FixedLinear {
    fn d_y(&self) -> usize {
        self.a.nrows()
    }
    fn d_theta(&self) -> usize {
        self.a.ncols()
    }
    fn d_phi(&self) -> usize {
        self.b.ncols()
    }
    fn d_xi(&self) -> usize {
        0
    }
    fn eval(&self, _xi: &[f64], theta: &[f64], phi: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(theta) + &self.b * DVector::from_column_slice(phi)
    }
    fn jac_theta(&self, _: &[f64], _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
    fn jac_phi(&self, _: &[f64], _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.b.clone())
    }
    fn hess_phi(&self, _: &[f64], _: &[f64], _: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let d = self.b.ncols();
        Some(vec![DMatrix::zeros(d, d); self.a.nrows()])
    }
}

/// Exact `θ`-EIG of Example 1, `½ ln(1 + ξ² σ_θ² / σ_ε²)`.
pub fn example1_eig(xi: f64) -> f64 {
    0.5 * (xi * xi * EX1_THETA_VAR / EX1_NOISE_VAR).ln_1p()
}

/// Example 1 as a design-dependent forward map, optionally with the signal
/// about `θ` scaled by `scale(ξ)`.
struct Example1Forward {
    /// Synthetic discretization `(h, b, η)`; `None` for the exact model.
    disc: Option<(f64, f64, f64)>,
}

impl Example1Forward {
    fn scale(&self, xi: f64) -> f64 {
        match self.disc {
            Some((h, b, eta)) if xi != 0.0 && h > 0.0 => synthetic_scale(xi, b * h.powf(eta)),
            _ => 1.0,
        }
    }
}

/// Signal scale `s` making `½ ln(1 + s² R) = ½ ln(1 + R) + bias`,
/// `R = ξ² σ_θ² / σ_ε²`.
fn synthetic_scale(xi: f64, bias: f64) -> f64 {
    let r = xi * xi * EX1_THETA_VAR / EX1_NOISE_VAR;
    (1.0 + (1.0 + r) * (2.0 * bias).exp_m1() / r).sqrt()
}

impl ForwardModel for Example1Forward {
    fn d_y(&self) -> usize {
        2
    }
    fn d_theta(&self) -> usize {
        1
    }
    fn d_phi(&self) -> usize {
        1
    }
    fn d_xi(&self) -> usize {
        1
    }
    fn eval(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> DVector<f64> {
        let s = self.scale(xi[0]);
        DVector::from_vec(vec![s * xi[0] * theta[0], (1.0 - xi[0]) * phi[0]])
    }
    fn jac_theta(&self, xi: &[f64], _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_column_slice(
            2,
            1,
            &[self.scale(xi[0]) * xi[0], 0.0],
        ))
    }
    fn jac_phi(&self, xi: &[f64], _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_column_slice(2, 1, &[0.0, 1.0 - xi[0]]))
    }
    fn hess_phi(&self, _: &[f64], _: &[f64], _: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(1, 1); 2])
    }
}

/// Example 1 without the nuisance parameter: `y = ξθ + ε`.
struct Example1NoNuisance;

impl ForwardModel for Example1NoNuisance {
    fn d_y(&self) -> usize {
        1
    }
    fn d_theta(&self) -> usize {
        1
    }
    fn d_phi(&self) -> usize {
        0
    }
    fn d_xi(&self) -> usize {
        1
    }
    fn eval(&self, xi: &[f64], theta: &[f64], _: &[f64]) -> DVector<f64> {
        DVector::from_element(1, xi[0] * theta[0])
    }
    fn jac_theta(&self, xi: &[f64], _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, xi[0]))
    }
    fn jac_phi(&self, _: &[f64], _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 0))
    }
}

fn example1_prior() -> PriorSpec {
    PriorSpec::independent(
        Distribution::normal(&[0.0], &[EX1_THETA_VAR]).expect("valid"),
        Distribution::normal(&[0.0], &[EX1_PHI_VAR]).expect("valid"),
    )
}

pub fn make_example1() -> (ExperimentModel, PriorSpec) {
    let model = ExperimentModel::new(
        Arc::new(Example1Forward { disc: None }),
        DMatrix::identity(2, 2) * EX1_NOISE_VAR,
        1,
    )
    .expect("valid noise");
    (model, example1_prior())
}

/// Example 1 with the nuisance parameter removed; same `θ`-EIG.
pub fn make_example1_no_nuisance() -> (ExperimentModel, PriorSpec) {
    let model = ExperimentModel::new(
        Arc::new(Example1NoNuisance),
        DMatrix::from_element(1, 1, EX1_NOISE_VAR),
        1,
    )
    .expect("valid noise");
    let prior =
        PriorSpec::without_nuisance(Distribution::normal(&[0.0], &[EX1_THETA_VAR]).expect("valid"));
    (model, prior)
}

/// Example 1 evaluated at mesh `h` with planted bias `b h^η` in the EIG and
/// per-evaluation work `h^-γ`.
///
/// Shifting the data by a constant leaves the EIG unchanged, so the bias is
/// planted by scaling the signal about `θ` instead: the exact EIG of the
/// model at `h` is `½ ln(1 + 100ξ²) + b h^η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDiscretized {
    pub b: f64,
    pub eta: f64,
    pub gamma: f64,
}

impl SyntheticDiscretized {
    pub fn new(b: f64, eta: f64, gamma: f64) -> Result<Self> {
        if !(b >= 0.0 && eta > 0.0 && gamma > 0.0) {
            return Err(EigError::InvalidConfig(
                "synthetic model needs b >= 0, eta > 0, gamma > 0".into(),
            ));
        }
        Ok(Self { b, eta, gamma })
    }

    /// The model at mesh `h`; `h = 0` is the exact base model.
    pub fn at(&self, h: f64) -> Result<(ExperimentModel, PriorSpec)> {
        if !(h >= 0.0 && h.is_finite()) {
            return Err(EigError::InvalidConfig(
                "mesh parameter must be non-negative".into(),
            ));
        }
        let fwd = Example1Forward {
            disc: Some((h, self.b, self.eta)),
        };
        let mut model =
            ExperimentModel::new(Arc::new(fwd), DMatrix::identity(2, 2) * EX1_NOISE_VAR, 1)?;
        if h > 0.0 {
            model = model.with_discretization(Discretization {
                h,
                eta: self.eta,
                gamma: self.gamma,
            });
        }
        Ok((model, example1_prior()))
    }

    pub fn analytic_eig(&self, xi: f64, h: f64) -> f64 {
        if xi == 0.0 {
            return 0.0;
        }
        example1_eig(xi) + self.b * h.powf(self.eta)
    }
}

/// How the `0.05` in the PK log-normal priors is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorReading {
    /// 0.05 is the variance of the log.
    #[default]
    Variance,
    /// 0.05 is the standard deviation of the log.
    StdDev,
}

impl PriorReading {
    fn log_var(self) -> f64 {
        match self {
            Self::Variance => 0.05,
            Self::StdDev => 0.05 * 0.05,
        }
    }
}

pub const PK_DOSE: f64 = 400.0;
pub const PK_SAMPLES: usize = 15;
pub const PK_DESIGN_BOUNDS: (f64, f64) = (0.01, 24.0);

/// One-compartment pharmacokinetic model
/// `g_j = D/φ · θ₁/(θ₁−θ₂) · (exp(−θ₂ξ_j) − exp(−θ₁ξ_j))`.
pub struct PkForward {
    pub dose: f64,
    pub n: usize,
}

impl PkForward {
    fn value(&self, t: f64, a: f64, b: f64, phi: f64) -> f64 {
        // θ₁/(θ₁−θ₂)·(e^{−θ₂t} − e^{−θ₁t}) = θ₁ t e^{−θ₂t} · (1 − e^{−u})/u, u = (θ₁−θ₂)t.
        let u = (a - b) * t;
        let ratio = if u.abs() < 1e-8 {
            1.0 - 0.5 * u
        } else {
            -(-u).exp_m1() / u
        };
        self.dose / phi * a * t * (-b * t).exp() * ratio
    }
}

impl ForwardModel for PkForward {
    fn d_y(&self) -> usize {
        self.n
    }
    fn d_theta(&self) -> usize {
        2
    }
    fn d_phi(&self) -> usize {
        1
    }
    fn d_xi(&self) -> usize {
        self.n
    }
    fn eval(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.n, |j, _| self.value(xi[j], theta[0], theta[1], phi[0]))
    }

    fn jac_theta(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Option<DMatrix<f64>> {
        let (a, b) = (theta[0], theta[1]);
        let d = a - b;
        if d.abs() < 1e-6 {
            return None;
        }
        let c = self.dose / phi[0];
        let q = a / d;
        let dq_da = -b / (d * d);
        let dq_db = a / (d * d);
        let mut j = DMatrix::zeros(self.n, 2);
        for (k, &t) in xi.iter().enumerate() {
            let ea = (-a * t).exp();
            let eb = (-b * t).exp();
            let delta = eb - ea;
            j[(k, 0)] = c * (dq_da * delta + q * t * ea);
            j[(k, 1)] = c * (dq_db * delta - q * t * eb);
        }
        Some(j)
    }

    fn jac_phi(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Option<DMatrix<f64>> {
        let g = self.eval(xi, theta, phi);
        Some(DMatrix::from_column_slice(
            self.n,
            1,
            (-g / phi[0]).as_slice(),
        ))
    }

    fn hess_phi(&self, xi: &[f64], theta: &[f64], phi: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let g = self.eval(xi, theta, phi);
        Some(
            g.iter()
                .map(|v| DMatrix::from_element(1, 1, 2.0 * v / (phi[0] * phi[0])))
                .collect(),
        )
    }
}

pub fn pk_prior(reading: PriorReading) -> PriorSpec {
    let v = reading.log_var();
    PriorSpec::independent(
        Distribution::lognormal(&[0.0, 0.1f64.ln()], &[v, v]).expect("valid"),
        Distribution::lognormal(&[20f64.ln()], &[v]).expect("valid"),
    )
}

pub fn make_pk(reading: PriorReading) -> (ExperimentModel, PriorSpec) {
    let model = ExperimentModel::new(
        Arc::new(PkForward {
            dose: PK_DOSE,
            n: PK_SAMPLES,
        }),
        DMatrix::identity(PK_SAMPLES, PK_SAMPLES) * 1e-2,
        1,
    )
    .expect("valid noise");
    (model, pk_prior(reading))
}

/// `ξ_j = 0.94 · 1.25^(j−1)`, `j = 1..15`.
pub fn pk_geometric_design() -> Vec<f64> {
    (0..PK_SAMPLES)
        .map(|j| 0.94 * 1.25f64.powi(j as i32))
        .collect()
}

/// Models addressable by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BuiltinModel {
    Example1 {
        #[serde(default = "default_true")]
        nuisance: bool,
    },
    Pk {
        #[serde(default)]
        prior_reading: PriorReading,
    },
    SyntheticDisc {
        b: f64,
        eta: f64,
        gamma: f64,
        #[serde(default)]
        h: f64,
    },
}

fn default_true() -> bool {
    true
}

impl BuiltinModel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Example1 { .. } => "example1",
            Self::Pk { .. } => "pk",
            Self::SyntheticDisc { .. } => "synthetic-disc",
        }
    }

    pub fn build(&self) -> Result<(ExperimentModel, PriorSpec)> {
        match *self {
            Self::Example1 { nuisance: true } => Ok(make_example1()),
            Self::Example1 { nuisance: false } => Ok(make_example1_no_nuisance()),
            Self::Pk { prior_reading } => Ok(make_pk(prior_reading)),
            Self::SyntheticDisc { b, eta, gamma, h } => {
                SyntheticDiscretized::new(b, eta, gamma)?.at(h)
            }
        }
    }

    /// Exact `θ`-EIG where a closed form exists.
    pub fn analytic_eig(&self, xi: &[f64]) -> Option<f64> {
        match *self {
            Self::Example1 { .. } => xi.first().map(|&x| example1_eig(x)),
            Self::SyntheticDisc { b, eta, gamma, h } => {
                let fam = SyntheticDiscretized::new(b, eta, gamma).ok()?;
                xi.first().map(|&x| fam.analytic_eig(x, h))
            }
            Self::Pk { .. } => None,
        }
    }

    pub fn default_design(&self) -> Vec<f64> {
        match self {
            Self::Pk { .. } => pk_geometric_design(),
            _ => vec![0.5],
        }
    }

    pub fn design_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            Self::Pk { .. } => vec![PK_DESIGN_BOUNDS; PK_SAMPLES],
            _ => vec![(0.0, 1.0)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Substreams;

    #[test]
    fn example1_oracle_values() {
        assert_eq!(example1_eig(0.0), 0.0);
        assert!((example1_eig(1.0) - 0.5 * 101f64.ln()).abs() < 1e-15);
        assert!((example1_eig(1.0) - 2.30756).abs() < 1e-5);
        assert!((example1_eig(0.5) - 0.5 * 26f64.ln()).abs() < 1e-15);
        assert!((example1_eig(0.5) - 1.62905).abs() < 1e-5);
        assert!((example1_eig(0.25) - 0.5 * 7.25f64.ln()).abs() < 1e-15);
        for xi in [0.0, 0.25, 0.5, 1.0] {
            let spec = LinearGaussianSpec::example1(xi);
            let eig = spec.analytic_eig(InformationAbout::Theta).unwrap();
            assert!((eig - example1_eig(xi)).abs() < 1e-13);
        }
    }

    #[test]
    fn joint_information_dominates() {
        for k in 0..100 {
            let xi = k as f64 / 99.0;
            let spec = LinearGaussianSpec::example1(xi);
            let t = spec.analytic_eig(InformationAbout::Theta).unwrap();
            let j = spec.analytic_eig(InformationAbout::Joint).unwrap();
            assert!(j >= t - 1e-14);
            let expected = t + 0.5 * ((1.0 - xi).powi(2)).ln_1p();
            assert!((j - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn example1_means() {
        let (m, _) = make_example1();
        assert_eq!(
            m.eval(&[1.0], &[2.0], &[5.0]).unwrap().as_slice(),
            &[2.0, 0.0]
        );
    }

    #[test]
    fn pk_output_by_hand() {
        let (m, _) = make_pk(PriorReading::Variance);
        let xi = vec![1.0; 15];
        let g = m.eval(&xi, &[1.0, 0.1], &[20.0]).unwrap();
        let expected = 20.0 / 0.9 * ((-0.1f64).exp() - (-1.0f64).exp());
        for v in g.iter() {
            assert!((v - expected).abs() < 1e-12);
        }
        assert!((expected - 11.9324).abs() < 1e-3);
    }

    #[test]
    fn pk_geometric_design_by_hand() {
        let d = pk_geometric_design();
        assert_eq!(d.len(), 15);
        assert!((d[0] - 0.94).abs() < 1e-15);
        assert!((d[14] - 21.37).abs() < 5e-3);
        assert!(d.iter().all(|&x| x > 0.0 && x <= 24.0));
    }

    #[test]
    fn pk_stable_near_equal_rates() {
        let f = PkForward { dose: 400.0, n: 1 };
        let a = 0.3;
        let near = f.value(2.0, a + 1e-12, a, 10.0);
        let limit = 40.0 * a * 2.0 * (-a * 2.0f64).exp();
        assert!((near - limit).abs() < 1e-9 * limit);
    }

    fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-8))
    }

    #[test]
    fn pk_jacobians_match_fd() {
        let (m, prior) = make_pk(PriorReading::Variance);
        let xi = pk_geometric_design();
        let mut rng = Substreams::new(9).stream("t", 0);
        for _ in 0..100 {
            let (t, p) = prior.sample(&mut rng);
            let an = m.jac_z(&xi, t.as_slice(), p.as_slice()).unwrap();
            let fd = m.jac_z_fd(&xi, t.as_slice(), p.as_slice()).unwrap();
            assert!(rel_close(&an, &fd, 1e-5), "{an}\n{fd}");
        }
        let med = [1.0, 0.1];
        let an = m.jac_z(&xi, &med, &[20.0]).unwrap();
        let fd = m.jac_z_fd(&xi, &med, &[20.0]).unwrap();
        assert!(rel_close(&an, &fd, 1e-5));
    }

    #[test]
    fn pk_second_derivative_in_phi() {
        let f = PkForward { dose: 400.0, n: 3 };
        let xi = [0.5, 2.0, 8.0];
        let (t, p) = ([1.1, 0.09], 18.0);
        let h = f.hess_phi(&xi, &t, &[p]).unwrap();
        let s = 1e-3;
        let gp = f.eval(&xi, &t, &[p + s]);
        let g0 = f.eval(&xi, &t, &[p]);
        let gm = f.eval(&xi, &t, &[p - s]);
        for k in 0..3 {
            let fd = (gp[k] - 2.0 * g0[k] + gm[k]) / (s * s);
            assert!((fd - h[k][(0, 0)]).abs() < 1e-5 * fd.abs());
        }
    }

    #[test]
    fn synthetic_at_zero_is_base_model() {
        let fam = SyntheticDiscretized::new(0.5, 2.0, 1.0).unwrap();
        let (m0, _) = fam.at(0.0).unwrap();
        let (base, _) = make_example1();
        let mut rng = Substreams::new(1).stream("t", 0);
        for _ in 0..50 {
            let xi: f64 = rand::Rng::random(&mut rng);
            let t: f64 = rand::Rng::random::<f64>(&mut rng) * 4.0 - 2.0;
            let p: f64 = rand::Rng::random::<f64>(&mut rng) - 0.5;
            assert_eq!(
                m0.eval(&[xi], &[t], &[p]).unwrap(),
                base.eval(&[xi], &[t], &[p]).unwrap()
            );
        }
        assert!(m0.discretization().is_none());
    }

    #[test]
    fn synthetic_bias_is_planted() {
        let fam = SyntheticDiscretized::new(0.3, 2.0, 1.0).unwrap();
        for h in [0.05, 0.1, 0.4] {
            let (m, p) = fam.at(h).unwrap();
            // Linear Gaussian: the θ-EIG follows from the effective Jacobian.
            let a = m.jac_theta(&[0.5], &[0.0], &[0.0]).unwrap();
            let spec = LinearGaussianSpec {
                a,
                b: DMatrix::from_column_slice(2, 1, &[0.0, 0.5]),
                theta_mean: DVector::zeros(1),
                theta_cov: DMatrix::identity(1, 1),
                phi_mean: DVector::zeros(1),
                phi_cov: DMatrix::from_element(1, 1, 1e-2),
                noise_cov: m.noise_cov().clone(),
                n_e: 1,
            };
            let eig = spec.analytic_eig(InformationAbout::Theta).unwrap();
            assert!((eig - example1_eig(0.5) - 0.3 * h * h).abs() < 1e-12);
            assert!((fam.analytic_eig(0.5, h) - eig).abs() < 1e-12);
            assert_eq!(p.d_phi(), 1);
            assert_eq!(m.discretization().unwrap().h, h);
        }
    }

    #[test]
    fn registry_round_trip() {
        let models = [
            BuiltinModel::Example1 { nuisance: true },
            BuiltinModel::Pk {
                prior_reading: PriorReading::StdDev,
            },
            BuiltinModel::SyntheticDisc {
                b: 1.0,
                eta: 2.0,
                gamma: 1.0,
                h: 0.1,
            },
        ];
        for m in models {
            let s = serde_json::to_string(&m).unwrap();
            assert!(s.contains(m.name()));
            let back: BuiltinModel = serde_json::from_str(&s).unwrap();
            assert_eq!(back, m);
            m.build().unwrap();
        }
        let bad = r#"{"name":"example1","bogus":1}"#;
        assert!(serde_json::from_str::<BuiltinModel>(bad).is_err());
    }
}
