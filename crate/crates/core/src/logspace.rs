//! Log-space averaging.
//!
//! Likelihoods in the inner loops underflow long before their logarithms lose
//! precision, so every average over likelihoods or importance weights is
//! formed from log values with the maximum factored out.

/// `log Σ exp(x_i)`; `-∞` for an empty slice or when every entry is `-∞`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `log((1/n) Σ exp(x_i))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// Squared coefficient of variation of `exp(x_i)`: unbiased sample variance
/// divided by the squared sample mean, evaluated on values shifted by their
/// maximum so neither moment overflows or underflows.
///
/// Returns `None` with fewer than two values or when every weight vanishes.
pub fn relative_variance(log_values: &[f64]) -> Option<f64> {
    let n = log_values.len();
    if n < 2 {
        return None;
    }
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let scaled: Vec<f64> = log_values.iter().map(|&v| (v - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n as f64;
    let var = scaled.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(var / (mean * mean))
}

/// Sample mean and unbiased sample variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}
