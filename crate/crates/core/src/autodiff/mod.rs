//! Dense MLP engine: forward/backward passes, losses, Adam, and a
//! central-difference gradient oracle.

mod adam;
mod loss;
mod matrix;
mod mlp;
pub mod snapshot;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use loss::{mse, smooth_l1};
pub use matrix::Matrix;
pub use mlp::{ForwardCache, Gradients, HiddenActivation, Layer, LayerGrad, Mlp, OutputActivation};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),
    #[error("singular matrix")]
    Singular,
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Central-difference gradient `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, NnError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(NnError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest componentwise `|a - n| / max(|a|, |n|, 1e-6)`.
///
/// The floor keeps components that are zero in both (dead units) from
/// dividing roundoff by roundoff.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
