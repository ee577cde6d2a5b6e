use statrs::distribution::{ContinuousCDF, StudentsT};

use super::EngineError;

/// Mean and 95% confidence half-width `t(0.975, n-1) * s / sqrt(n)` with
/// the sample standard deviation `s`.
pub fn trials_ci(accuracies: &[f64]) -> Result<(f64, f64), EngineError> {
    let n = accuracies.len();
    if n < 2 {
        return Err(EngineError::TooFewTrials(n));
    }
    let nf = n as f64;
    let mean = accuracies.iter().sum::<f64>() / nf;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / nf.sqrt()))
}
