//! Same-padding stride-1 2-D convolution, forward and backward.
//!
//! Loops are arranged so the innermost dimension walks contiguous image
//! rows, which the compiler vectorizes.

use super::{ParamBlock, Scalar, Tensor, TensorError};

/// Index range along one axis where both `i` and `i + d` are in `0..n`.
/// Returns an empty well-formed range when the shift pushes everything out.
#[inline]
fn shifted_range(n: usize, d: isize) -> (usize, usize) {
    let lo = 0.max(-d) as usize;
    let hi = (n as isize).min(n as isize - d).max(0) as usize;
    (lo, hi.max(lo))
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    block: &ParamBlock<T>,
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let w = &block.weights;
    if w.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d weights",
            expected: vec![0, 0, 0, 0],
            actual: w.shape().to_vec(),
        });
    }
    let (c_out, c_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "conv kernel must be square with odd size",
        });
    }
    if input.rank() != 3 || input.shape()[0] != c_in {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d input",
            expected: vec![c_in, 0, 0],
            actual: input.shape().to_vec(),
        });
    }
    if block.bias.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d bias",
            expected: vec![c_out],
            actual: block.bias.shape().to_vec(),
        });
    }
    let (h, w) = (input.shape()[1], input.shape()[2]);
    Ok((c_out, c_in, kh, h, w))
}

/// `input` is `[C_in, H, W]`; output is `[C_out, H, W]` (same padding).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    block: &ParamBlock<T>,
) -> Result<Tensor<T>, TensorError> {
    let (c_out, c_in, k, h, w) = check_conv_shapes(input, block)?;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(vec![c_out, h, w]);

    for co in 0..c_out {
        let bias = block.bias.data()[co];
        let out_base = co * h * w;
        out.data_mut()[out_base..out_base + h * w].fill(bias);
        for ci in 0..c_in {
            let in_base = ci * h * w;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let weight = block.weights.data()[((co * c_in + ci) * k + ky) * k + kx];
                    let (y0, y1) = shifted_range(h, dy);
                    let (x0, x1) = shifted_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = in_base + iy * w;
                        let dst = out_base + y * w;
                        // Split borrows: output channel co never aliases input.
                        let (in_row, out_row) = (
                            &input.data()[src + ((x0 as isize + dx) as usize)
                                ..src + ((x1 as isize + dx) as usize)],
                            &mut out.data_mut()[dst + x0..dst + x1],
                        );
                        for (o, &i) in out_row.iter_mut().zip(in_row) {
                            *o += weight * i;
                        }
                    }
                }
            }
        }
    }
    debug_assert!(out.is_all_finite());
    Ok(out)
}

/// Accumulates parameter gradients into `block` and returns the gradient
/// with respect to the input. `cached_input` must be the tensor that was
/// fed to the matching forward call.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    block: &mut ParamBlock<T>,
) -> Result<Tensor<T>, TensorError> {
    let (c_out, c_in, k, h, w) = check_conv_shapes(cached_input, block)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d grad_out",
            expected: vec![c_out, h, w],
            actual: grad_out.shape().to_vec(),
        });
    }
    let pad = (k / 2) as isize;
    let mut grad_in = Tensor::zeros(vec![c_in, h, w]);

    for co in 0..c_out {
        let go_base = co * h * w;
        let mut db = T::ZERO;
        for &g in &grad_out.data()[go_base..go_base + h * w] {
            db += g;
        }
        block.grad_bias.data_mut()[co] += db;

        for ci in 0..c_in {
            let in_base = ci * h * w;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((co * c_in + ci) * k + ky) * k + kx;
                    let weight = block.weights.data()[widx];
                    let (y0, y1) = shifted_range(h, dy);
                    let (x0, x1) = shifted_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut dw = T::ZERO;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = in_base + iy * w + ((x0 as isize + dx) as usize);
                        let go = go_base + y * w + x0;
                        let n = x1 - x0;
                        let in_row = &cached_input.data()[src..src + n];
                        let go_row = &grad_out.data()[go..go + n];
                        for (&i, &g) in in_row.iter().zip(go_row) {
                            dw += i * g;
                        }
                        let gi_row = &mut grad_in.data_mut()[src..src + n];
                        for (gi, &g) in gi_row.iter_mut().zip(go_row) {
                            *gi += weight * g;
                        }
                    }
                    block.grad_weights.data_mut()[widx] += dw;
                }
            }
        }
    }
    Ok(grad_in)
}
