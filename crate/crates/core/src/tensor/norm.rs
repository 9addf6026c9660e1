//! Per-channel normalization over the spatial dimensions of one image.
//!
//! Train mode normalizes with the current input's statistics and folds them
//! into running estimates (momentum 0.9); eval mode normalizes with the
//! running estimates. Population variance throughout.

use super::{Mode, ParamBlock, Scalar, Tensor, TensorError};

/// Channels whose variance falls below this floor are normalized with the
/// floor instead, so constant channels stay finite.
pub const NORM_VAR_FLOOR: f64 = 1e-5;

const RUNNING_MOMENTUM: f64 = 0.9;

/// State the backward pass needs from the matching forward call.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    /// Per channel: whether the variance floor was active (variance is then
    /// treated as a constant in the backward pass).
    floored: Vec<bool>,
    mode: Mode,
}

fn check_norm_shapes<T: Scalar>(
    input: &Tensor<T>,
    block: &ParamBlock<T>,
) -> Result<(usize, usize), TensorError> {
    if input.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            context: "norm2d input",
            expected: vec![block.weights.len(), 0, 0],
            actual: input.shape().to_vec(),
        });
    }
    let c = input.shape()[0];
    if block.weights.shape() != [c] || block.bias.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            context: "norm2d scale/shift",
            expected: vec![c],
            actual: block.weights.shape().to_vec(),
        });
    }
    Ok((c, input.shape()[1] * input.shape()[2]))
}

pub fn norm2d_forward<T: Scalar>(
    input: &Tensor<T>,
    block: &mut ParamBlock<T>,
    mode: Mode,
) -> Result<(Tensor<T>, NormCache<T>), TensorError> {
    let (channels, n) = check_norm_shapes(input, block)?;
    let running = block
        .norm_state
        .as_mut()
        .ok_or(TensorError::MissingCache("norm running statistics"))?;

    let floor = T::from_f64(NORM_VAR_FLOOR);
    let momentum = T::from_f64(RUNNING_MOMENTUM);
    let inv_n = T::from_f64(1.0 / n as f64);

    let mut normalized = Tensor::zeros(input.shape().to_vec());
    let mut inv_std = Vec::with_capacity(channels);
    let mut floored = Vec::with_capacity(channels);

    for c in 0..channels {
        let xs = &input.data()[c * n..(c + 1) * n];
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::ZERO;
                for &x in xs {
                    sum += x;
                }
                let mean = sum * inv_n;
                let mut sq = T::ZERO;
                for &x in xs {
                    let d = x - mean;
                    sq += d * d;
                }
                let var = sq * inv_n;
                let rm = &mut running.mean.data_mut()[c];
                *rm = momentum * *rm + (T::ONE - momentum) * mean;
                let rv = &mut running.var.data_mut()[c];
                *rv = momentum * *rv + (T::ONE - momentum) * var;
                (mean, var)
            }
            Mode::Eval => (running.mean.data()[c], running.var.data()[c]),
        };
        let is_floored = var <= floor;
        let denom = if is_floored { floor } else { var };
        let istd = T::ONE / denom.sqrt();
        inv_std.push(istd);
        floored.push(is_floored);

        let out = &mut normalized.data_mut()[c * n..(c + 1) * n];
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = (x - mean) * istd;
        }
    }

    let cache = NormCache {
        normalized: normalized.clone(),
        inv_std,
        floored,
        mode,
    };
    let mut output = normalized;
    for c in 0..channels {
        let scale = block.weights.data()[c];
        let shift = block.bias.data()[c];
        for v in &mut output.data_mut()[c * n..(c + 1) * n] {
            *v = scale * *v + shift;
        }
    }
    debug_assert!(output.is_all_finite());
    Ok((output, cache))
}

/// Accumulates scale/shift gradients into `block` and returns the gradient
/// with respect to the input.
pub fn norm2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &NormCache<T>,
    block: &mut ParamBlock<T>,
) -> Result<Tensor<T>, TensorError> {
    grad_out.check_same_shape(&cache.normalized, "norm2d grad_out")?;
    let channels = grad_out.shape()[0];
    let n = grad_out.len() / channels;
    let inv_n = T::from_f64(1.0 / n as f64);

    let mut grad_in = Tensor::zeros(grad_out.shape().to_vec());
    for c in 0..channels {
        let g = &grad_out.data()[c * n..(c + 1) * n];
        let xhat = &cache.normalized.data()[c * n..(c + 1) * n];
        let istd = cache.inv_std[c];
        let scale = block.weights.data()[c];

        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for (&gi, &xi) in g.iter().zip(xhat) {
            sum_g += gi;
            sum_gx += gi * xi;
        }
        block.grad_bias.data_mut()[c] += sum_g;
        block.grad_weights.data_mut()[c] += sum_gx;

        let gi_out = &mut grad_in.data_mut()[c * n..(c + 1) * n];
        match cache.mode {
            // Batch statistics are functions of the input except where the
            // variance floor pinned them.
            Mode::Train => {
                let mean_g = sum_g * inv_n;
                let mean_gx = sum_gx * inv_n;
                if cache.floored[c] {
                    for (o, &gi) in gi_out.iter_mut().zip(g) {
                        *o = scale * istd * (gi - mean_g);
                    }
                } else {
                    for ((o, &gi), &xi) in gi_out.iter_mut().zip(g).zip(xhat) {
                        *o = scale * istd * (gi - mean_g - xi * mean_gx);
                    }
                }
            }
            Mode::Eval => {
                for (o, &gi) in gi_out.iter_mut().zip(g) {
                    *o = scale * istd * gi;
                }
            }
        }
    }
    Ok(grad_in)
}
