//! Segmentation consistency loss.
//!
//! The per-pixel weight `xi = max(0, |y - p| - epsilon)` singles out pixels
//! predicted badly beyond the epsilon band; the loss is the xi-weighted
//! cross-entropy. xi is a constant in the backward pass — no gradient flows
//! through the max/abs — so well-predicted pixels are simply ignored rather
//! than pushed toward zero weight.

use crate::tensor::{loss_bce_weighted, Scalar, Tensor, TensorError};

/// Elementwise `max(0, |target - pred| - epsilon)`; values lie in
/// `[0, 1 - epsilon]` for in-range inputs.
pub fn consistency_weights<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>, TensorError> {
    debug_assert!(epsilon >= 0.0);
    let eps = T::from_f64(epsilon);
    target.zip_map(pred, |y, p| ((y - p).abs() - eps).max(T::ZERO))
}

/// Consistency loss and its gradient with respect to the prediction.
pub fn loss_sc<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    epsilon: f64,
) -> Result<(T, Tensor<T>), TensorError> {
    let xi = consistency_weights(target, pred, epsilon)?;
    loss_bce_weighted(target, pred, &xi)
}
