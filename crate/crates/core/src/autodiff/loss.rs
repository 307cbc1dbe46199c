//! Regression losses averaged over every component of the prediction.

use super::NnError;

/// Smooth-L1 (Huber with transition at 1): `0.5 d²` for `|d| < 1`,
/// `|d| - 0.5` otherwise, averaged over all components.
pub fn smooth_l1(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    check_lengths(prediction, target)?;
    if prediction.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = prediction.len() as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d / n
            } else {
                loss += d.abs() - 0.5;
                d.signum() / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean squared error with gradient `2 d / n`.
pub fn mse(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    check_lengths(prediction, target)?;
    if prediction.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = prediction.len() as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

fn check_lengths(prediction: &[f64], target: &[f64]) -> Result<(), NnError> {
    if prediction.len() != target.len() {
        return Err(NnError::Shape(format!(
            "prediction has {} components, target {}",
            prediction.len(),
            target.len()
        )));
    }
    Ok(())
}
