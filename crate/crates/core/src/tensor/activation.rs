//! Elementwise activations and their backward passes.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Sigmoid,
}

/// Numerically stable sigmoid: never exponentiates a positive argument.
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn activation_forward<T: Scalar>(input: &Tensor<T>, kind: ActKind) -> Tensor<T> {
    match kind {
        ActKind::Relu => input.map(|v| v.max(T::ZERO)),
        ActKind::Sigmoid => input.map(sigmoid),
    }
}

/// Backward pass expressed in terms of the cached forward *output*:
/// relu' = [y > 0], sigmoid' = y(1 - y).
pub fn activation_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    kind: ActKind,
    cached_output: &Tensor<T>,
) -> Tensor<T> {
    debug_assert_eq!(grad_out.shape(), cached_output.shape());
    match kind {
        ActKind::Relu => grad_out
            .zip_map(cached_output, |g, y| if y > T::ZERO { g } else { T::ZERO })
            .expect("shape checked"),
        ActKind::Sigmoid => grad_out
            .zip_map(cached_output, |g, y| g * y * (T::ONE - y))
            .expect("shape checked"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Tensor::<f64>::zeros(vec![1]);
        let y = activation_forward(&x, ActKind::Sigmoid);
        assert_eq!(y.data()[0], 0.5);
    }

    #[test]
    fn relu_clips_negatives() {
        let x = Tensor::new(vec![2], vec![-1.0f64, 2.0]).unwrap();
        let y = activation_forward(&x, ActKind::Relu);
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_backward_at_zero_is_quarter_of_upstream() {
        // sigma'(0) = sigma(0) * (1 - sigma(0)) = 0.25
        let x = Tensor::<f64>::zeros(vec![1]);
        let y = activation_forward(&x, ActKind::Sigmoid);
        let g = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let gx = activation_backward(&g, ActKind::Sigmoid, &y);
        assert!((gx.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_output_is_in_open_unit_interval() {
        // Beyond |x| ~ 16 the f32 result rounds to exactly 0 or 1; the BCE
        // clamp downstream covers that regime.
        let x = Tensor::new(vec![4], vec![-15.0f32, -3.0, 3.0, 15.0]).unwrap();
        let y = activation_forward(&x, ActKind::Sigmoid);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
