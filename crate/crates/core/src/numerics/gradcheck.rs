//! Central finite-difference verification of analytic gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst relative error between the analytic gradient returned by `f` and
/// central differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` over every coordinate.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("grad_check eps must be positive, got {eps}")));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("non-finite value {value} at the probe point")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "grad_check",
            left: x.shape().to_vec(),
            right: analytic.shape().to_vec(),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("non-finite value while perturbing coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
