//! Pixel-weighted binary cross-entropy.

use super::{Scalar, Tensor, TensorError};

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` before the
/// logarithms; outside that band the gradient is zero (consistent with the
/// clamp being flat).
pub const PRED_CLAMP: f64 = 1e-7;

/// Mean over pixels of `w * (-y ln p - (1 - y) ln(1 - p))`.
///
/// Returns the scalar loss and its gradient with respect to the prediction.
pub fn loss_bce_weighted<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(T, Tensor<T>), TensorError> {
    target.check_same_shape(pred, "bce target/pred")?;
    target.check_same_shape(weight, "bce target/weight")?;

    let lo = T::from_f64(PRED_CLAMP);
    let hi = T::ONE - lo;
    let n = target.len();
    let inv_n = T::from_f64(1.0 / n as f64);

    let mut grad = Tensor::zeros(pred.shape().to_vec());
    let mut acc = 0.0f64;
    for i in 0..n {
        let y = target.data()[i];
        let w = weight.data()[i];
        let raw = pred.data()[i];
        let p = raw.max(lo).min(hi);
        let term = w * (-(y * p.ln()) - (T::ONE - y) * (T::ONE - p).ln());
        acc += term.to_f64();
        grad.data_mut()[i] = if raw < lo || raw > hi {
            T::ZERO
        } else {
            inv_n * w * (p - y) / (p * (T::ONE - p))
        };
    }
    let loss = T::from_f64(acc / n as f64);
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            context: "bce loss",
            index: 0,
            value: loss.to_f64(),
        });
    }
    Ok((loss, grad))
}

/// Unweighted binary cross-entropy (`w = 1` everywhere).
pub fn loss_bce<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
) -> Result<(T, Tensor<T>), TensorError> {
    let ones = Tensor::full(target.shape().to_vec(), T::ONE);
    loss_bce_weighted(target, pred, &ones)
}
