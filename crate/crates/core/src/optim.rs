//! Box-projected BFGS with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

use crate::linalg;

/// A smooth function to minimize. `value` may return `+∞` for infeasible
/// points; the line search treats those as failed trials.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Positive semi-definite curvature estimate, e.g. a Gauss-Newton
    /// Hessian. Used to seed the inverse Hessian and for the final Newton
    /// polish.
    fn curvature(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    /// Absolute tolerance on the projected gradient norm.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Maximum number of curvature-based Newton steps taken after the
    /// quasi-Newton phase.
    pub polish_steps: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 200,
            polish_steps: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

pub fn clamp(x: &mut DVector<f64>, bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (v, &(lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Variables not pinned by an active bound whose descent direction points
/// outside the box.
fn free_mask(g: &DVector<f64>, x: &DVector<f64>, bounds: Option<&[(f64, f64)]>) -> Vec<bool> {
    (0..x.len())
        .map(|i| match bounds {
            Some(b) => {
                let (lo, hi) = b[i];
                !((x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0))
            }
            None => true,
        })
        .collect()
}

fn projected(g: &DVector<f64>, x: &DVector<f64>, bounds: Option<&[(f64, f64)]>) -> DVector<f64> {
    let free = free_mask(g, x, bounds);
    DVector::from_iterator(
        g.len(),
        g.iter().zip(&free).map(|(v, &f)| if f { *v } else { 0.0 }),
    )
}

fn seed_inverse(obj: &dyn Objective, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    obj.curvature(x)
        .and_then(|c| linalg::cholesky_with_jitter(&c, "curvature").ok())
        .map(|(_, chol, _)| chol.inverse())
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| DMatrix::identity(n, n))
}

pub fn minimize(
    obj: &dyn Objective,
    x0: &DVector<f64>,
    bounds: Option<&[(f64, f64)]>,
    opts: &BfgsOptions,
) -> Minimum {
    let n = x0.len();
    let mut x = x0.clone();
    clamp(&mut x, bounds);
    let mut f = obj.value(&x);
    let mut g = obj.gradient(&x);
    if n == 0 {
        return Minimum {
            x,
            value: f,
            grad_norm: 0.0,
            iterations: 0,
            converged: f.is_finite(),
        };
    }
    let mut h_inv = seed_inverse(obj, &x);
    let mut iterations = 0;
    let mut pg_norm = projected(&g, &x, bounds).norm();

    while iterations < opts.max_iters && pg_norm > opts.grad_tol && f.is_finite() {
        iterations += 1;
        let mut fresh = false;
        let step = loop {
            // Restrict the quasi-Newton step to the free variables so the
            // direction stays a descent direction when bounds are active.
            let free = free_mask(&g, &x, bounds);
            let mut d = DVector::zeros(n);
            for i in (0..n).filter(|&i| free[i]) {
                d[i] = -(0..n)
                    .filter(|&j| free[j])
                    .map(|j| h_inv[(i, j)] * g[j])
                    .sum::<f64>();
            }
            let found = if d.dot(&g) < 0.0 {
                line_search(obj, &x, f, &g, &d, bounds)
            } else {
                None
            };
            match found {
                Some(s) => break Some(s),
                None if !fresh => {
                    // Restart from the curvature seed, then from steepest
                    // descent scaled to a unit step.
                    fresh = true;
                    h_inv = seed_inverse(obj, &x);
                    if -(&h_inv * &g).dot(&g) >= 0.0 {
                        h_inv = DMatrix::identity(n, n) / g.norm().max(1.0);
                    }
                }
                None => break None,
            }
        };
        let Some((x_new, f_new)) = step else { break };
        let g_new = obj.gradient(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        pg_norm = projected(&g, &x, bounds).norm();
    }

    for _ in 0..opts.polish_steps {
        let Some(c) = obj.curvature(&x) else { break };
        let Ok((_, chol, _)) = linalg::cholesky_with_jitter(&c, "curvature") else {
            break;
        };
        let mut x_new = &x - chol.solve(&g);
        clamp(&mut x_new, bounds);
        let f_new = obj.value(&x_new);
        if !(f_new <= f + 1e-14 * f.abs().max(1.0)) {
            break;
        }
        let g_new = obj.gradient(&x_new);
        let pg_new = projected(&g_new, &x_new, bounds).norm();
        if !(pg_new < pg_norm) {
            break;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        pg_norm = pg_new;
    }

    Minimum {
        converged: pg_norm <= opts.grad_tol && f.is_finite(),
        x,
        value: f,
        grad_norm: pg_norm,
        iterations,
    }
}

fn line_search(
    obj: &dyn Objective,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    d: &DVector<f64>,
    bounds: Option<&[(f64, f64)]>,
) -> Option<(DVector<f64>, f64)> {
    let mut alpha = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let mut trial = x + d * alpha;
        clamp(&mut trial, bounds);
        let decrease = g.dot(&(&trial - x));
        let ft = obj.value(&trial);
        if ft.is_finite() && ft <= f + ARMIJO_C * decrease && decrease < 0.0 {
            return Some((trial, ft));
        }
        alpha *= 0.5;
    }
    None
}
