//! Adam with bias correction, one moment pair per parameter block.

use super::{ParamBlock, Scalar, Tensor, TensorError};

#[derive(Debug, Clone)]
struct MomentPair<T> {
    m_weights: Tensor<T>,
    v_weights: Tensor<T>,
    m_bias: Tensor<T>,
    v_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    slots: Vec<MomentPair<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(blocks: &[&ParamBlock<T>], lr: f64, beta1: f64, beta2: f64) -> Self {
        let slots = blocks
            .iter()
            .map(|b| MomentPair {
                m_weights: Tensor::zeros(b.weights.shape().to_vec()),
                v_weights: Tensor::zeros(b.weights.shape().to_vec()),
                m_bias: Tensor::zeros(b.bias.shape().to_vec()),
                v_bias: Tensor::zeros(b.bias.shape().to_vec()),
            })
            .collect();
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            eps: T::from_f64(1e-8),
            step: 0,
            slots,
        }
    }
}

fn update_tensor<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    state_lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    bc1: T,
    bc2: T,
) {
    for i in 0..param.len() {
        let g = grad.data()[i];
        let mi = &mut m.data_mut()[i];
        *mi = beta1 * *mi + (T::ONE - beta1) * g;
        let vi = &mut v.data_mut()[i];
        *vi = beta2 * *vi + (T::ONE - beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        param.data_mut()[i] -= state_lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam update over all blocks; gradients are zeroed afterwards.
pub fn adam_step<T: Scalar>(
    blocks: &mut [&mut ParamBlock<T>],
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    if blocks.len() != state.slots.len() {
        return Err(TensorError::ShapeMismatch {
            context: "adam block count",
            expected: vec![state.slots.len()],
            actual: vec![blocks.len()],
        });
    }
    state.step += 1;
    let one = T::ONE;
    let mut b1p = one;
    let mut b2p = one;
    for _ in 0..state.step {
        b1p *= state.beta1;
        b2p *= state.beta2;
    }
    let bc1 = one - b1p;
    let bc2 = one - b2p;

    for (block, slot) in blocks.iter_mut().zip(&mut state.slots) {
        block
            .weights
            .check_same_shape(&slot.m_weights, "adam weight moments")?;
        update_tensor(
            &mut block.weights,
            &block.grad_weights,
            &mut slot.m_weights,
            &mut slot.v_weights,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
        update_tensor(
            &mut block.bias,
            &block.grad_bias,
            &mut slot.m_bias,
            &mut slot.v_bias,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
        block.zero_grads();
    }
    Ok(())
}
