use crate::error::{Error, Result};
use crate::kernels::dropout::{BitMask, DropoutMask};
use crate::numerics::{Real, Tensor};
use crate::par;

fn merge_columns<T: Real>(partials: Vec<Vec<T>>, out: &mut [T]) {
    let total = par::tree_merge(partials, |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
        a
    });
    match total {
        Some(t) => out.copy_from_slice(&t),
        None => out.fill(T::zero()),
    }
}

/// Column sums of a `rows x width` matrix into `out` (overwritten).
pub fn bias_grad_into<T: Real>(dy: &[T], width: usize, out: &mut [T]) {
    let rows = dy.len() / width;
    let partials = par::map_blocks(rows, par::REDUCE_BLOCK_ROWS, |range| {
        let mut acc = vec![T::zero(); width];
        for r in range {
            acc.iter_mut()
                .zip(&dy[r * width..(r + 1) * width])
                .for_each(|(a, &v)| *a += v);
        }
        acc
    });
    merge_columns(partials, out);
}

/// `dx = mask * dy / (1 - p)` and `dbias = column sums of dx` in one
/// traversal. The residual gradient is `dy` itself.
pub fn bias_dropout_residual_backward_into<T: Real>(
    dy: &[T],
    mask: &DropoutMask,
    width: usize,
    dx: &mut [T],
    dbias: &mut [T],
) {
    let scale = T::from_f64(mask.scale());
    let partials = par::map_row_blocks_mut(dx, width, par::REDUCE_BLOCK_ROWS, |r0, block| {
        let mut acc = vec![T::zero(); width];
        for (k, out) in block.iter_mut().enumerate() {
            let i = r0 * width + k;
            let v = if mask.kept(i) {
                dy[i] * scale
            } else {
                T::zero()
            };
            *out = v;
            acc[k % width] += v;
        }
        acc
    });
    merge_columns(partials, dbias);
}

/// `dx = relu * mask * dy / (1 - p)`, `dbias = column sums of dx`.
pub fn bias_relu_dropout_backward_into<T: Real>(
    dy: &[T],
    mask: &DropoutMask,
    relu: &BitMask,
    width: usize,
    dx: &mut [T],
    dbias: &mut [T],
) {
    let scale = T::from_f64(mask.scale());
    let partials = par::map_row_blocks_mut(dx, width, par::REDUCE_BLOCK_ROWS, |r0, block| {
        let mut acc = vec![T::zero(); width];
        for (k, out) in block.iter_mut().enumerate() {
            let i = r0 * width + k;
            let v = if relu.get(i) && mask.kept(i) {
                dy[i] * scale
            } else {
                T::zero()
            };
            *out = v;
            acc[k % width] += v;
        }
        acc
    });
    merge_columns(partials, dbias);
}

/// Returns `(dx, dbias, dresidual)`.
pub fn bias_dropout_residual_backward<T: Real>(
    dy: &Tensor<T>,
    mask: &DropoutMask,
) -> Result<(Tensor<T>, Vec<T>, Tensor<T>)> {
    if mask.len() != dy.len() {
        return Err(Error::ShapeMismatch("dropout mask length".into()));
    }
    let w = dy.cols();
    let mut dx = Tensor::zeros(dy.shape())?;
    let mut db = vec![T::zero(); w];
    bias_dropout_residual_backward_into(dy.data(), mask, w, dx.data_mut(), &mut db);
    Ok((dx, db, dy.clone()))
}

/// Returns `(dx, dbias)`.
pub fn bias_relu_dropout_backward<T: Real>(
    dy: &Tensor<T>,
    mask: &DropoutMask,
    relu: &BitMask,
) -> Result<(Tensor<T>, Vec<T>)> {
    if mask.len() != dy.len() || relu.len() != dy.len() {
        return Err(Error::ShapeMismatch("mask length".into()));
    }
    let w = dy.cols();
    let mut dx = Tensor::zeros(dy.shape())?;
    let mut db = vec![T::zero(); w];
    bias_relu_dropout_backward_into(dy.data(), mask, relu, w, dx.data_mut(), &mut db);
    Ok((dx, db))
}
