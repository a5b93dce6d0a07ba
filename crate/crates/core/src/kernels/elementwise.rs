//! Fused element-wise tails: bias + dropout + residual, bias + ReLU +
//! dropout, and the bias-add/head reshapes around attention. Each is a
//! single traversal that writes only its outputs.

use crate::error::{Error, Result};
use crate::kernels::dropout::{check_drop_prob, BitMask, DropoutMask};
use crate::numerics::{Real, Tensor};
use crate::par;

/// Elements per parallel task; a multiple of 64 so bit-mask words are never
/// shared between tasks.
const CHUNK: usize = 64 * 64;

/// `y = mask * (x + bias) / (1 - p) + residual`, bias broadcast over rows.
pub fn bias_dropout_residual_into<T: Real>(
    x: &[T],
    bias: &[T],
    residual: &[T],
    mask: &DropoutMask,
    y: &mut [T],
) {
    let w = bias.len();
    let scale = T::from_f64(mask.scale());
    par::for_each_row(y, CHUNK, |c, yc| {
        let base = c * CHUNK;
        for (k, out) in yc.iter_mut().enumerate() {
            let i = base + k;
            let v = if mask.kept(i) {
                (x[i] + bias[i % w]) * scale
            } else {
                T::zero()
            };
            *out = v + residual[i];
        }
    });
}

/// `y = mask * max(x + bias, 0) / (1 - p)`; `relu` records `x + bias > 0`.
pub fn bias_relu_dropout_into<T: Real>(
    x: &[T],
    bias: &[T],
    mask: &DropoutMask,
    y: &mut [T],
    relu: &mut BitMask,
) {
    let w = bias.len();
    let scale = T::from_f64(mask.scale());
    par::for_each_row2(y, CHUNK, relu.words_mut(), CHUNK / 64, |c, yc, words| {
        let base = c * CHUNK;
        words.fill(0);
        for (k, out) in yc.iter_mut().enumerate() {
            let i = base + k;
            let pre = x[i] + bias[i % w];
            let pos = pre > T::zero();
            if pos {
                words[k / 64] |= 1 << (k % 64);
            }
            *out = if pos && mask.kept(i) {
                pre * scale
            } else {
                T::zero()
            };
        }
    });
}

fn check_bias<T: Real>(x: &Tensor<T>, bias: &[T]) -> Result<()> {
    if bias.len() != x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "bias of {} for last dim {}",
            bias.len(),
            x.cols()
        )));
    }
    Ok(())
}

pub fn bias_dropout_residual<T: Real>(
    x: &Tensor<T>,
    bias: &[T],
    residual: &Tensor<T>,
    p: f64,
    seed: u64,
) -> Result<(Tensor<T>, DropoutMask)> {
    check_drop_prob(p)?;
    let mask = DropoutMask::generate(seed, p, x.len())?;
    let y = bias_dropout_residual_with_mask(x, bias, residual, &mask)?;
    Ok((y, mask))
}

pub fn bias_dropout_residual_with_mask<T: Real>(
    x: &Tensor<T>,
    bias: &[T],
    residual: &Tensor<T>,
    mask: &DropoutMask,
) -> Result<Tensor<T>> {
    check_bias(x, bias)?;
    if residual.shape() != x.shape() || mask.len() != x.len() {
        return Err(Error::ShapeMismatch("residual or mask shape".into()));
    }
    let mut y = Tensor::zeros(x.shape())?;
    bias_dropout_residual_into(x.data(), bias, residual.data(), mask, y.data_mut());
    Ok(y)
}

pub fn bias_relu_dropout<T: Real>(
    x: &Tensor<T>,
    bias: &[T],
    p: f64,
    seed: u64,
) -> Result<(Tensor<T>, DropoutMask, BitMask)> {
    check_drop_prob(p)?;
    let mask = DropoutMask::generate(seed, p, x.len())?;
    let (y, relu) = bias_relu_dropout_with_mask(x, bias, &mask)?;
    Ok((y, mask, relu))
}

pub fn bias_relu_dropout_with_mask<T: Real>(
    x: &Tensor<T>,
    bias: &[T],
    mask: &DropoutMask,
) -> Result<(Tensor<T>, BitMask)> {
    check_bias(x, bias)?;
    if mask.len() != x.len() {
        return Err(Error::ShapeMismatch("dropout mask length".into()));
    }
    let mut y = Tensor::zeros(x.shape())?;
    let mut relu = BitMask::zeros(x.len());
    bias_relu_dropout_into(x.data(), bias, mask, y.data_mut(), &mut relu);
    Ok((y, relu))
}

/// Geometry of a `[B, N, L, dh]` head-major tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Heads {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn elements(&self) -> usize {
        self.batch * self.len * self.model_dim()
    }
}

/// Bias-add and reshape: reads the `d`-wide column block starting at
/// `col_offset` of a `[B*L, src_width]` matrix, adds `bias`, and writes it
/// head-major into `dst` (`[B, N, L, dh]`).
pub fn split_heads_bias<T: Real>(
    src: &[T],
    src_width: usize,
    col_offset: usize,
    bias: &[T],
    g: Heads,
    dst: &mut [T],
) {
    let (l, dh) = (g.len, g.head_dim);
    par::for_each_row(dst, l * dh, |bh, block| {
        let (b, h) = (bh / g.heads, bh % g.heads);
        for t in 0..l {
            let s = (b * l + t) * src_width + col_offset + h * dh;
            let bias = &bias[h * dh..(h + 1) * dh];
            for e in 0..dh {
                block[t * dh + e] = src[s + e] + bias[e];
            }
        }
    });
}

/// [`split_heads_bias`] without the bias.
pub fn split_heads<T: Real>(
    src: &[T],
    src_width: usize,
    col_offset: usize,
    g: Heads,
    dst: &mut [T],
) {
    let (l, dh) = (g.len, g.head_dim);
    par::for_each_row(dst, l * dh, |bh, block| {
        let (b, h) = (bh / g.heads, bh % g.heads);
        for t in 0..l {
            let s = (b * l + t) * src_width + col_offset + h * dh;
            block[t * dh..(t + 1) * dh].copy_from_slice(&src[s..s + dh]);
        }
    });
}

/// Inverse reshape: writes head-major `src` into the column block at
/// `col_offset` of a `[B*L, dst_width]` matrix.
pub fn merge_heads<T: Real>(
    src: &[T],
    g: Heads,
    dst: &mut [T],
    dst_width: usize,
    col_offset: usize,
) {
    let (l, dh) = (g.len, g.head_dim);
    par::for_each_row(dst, dst_width, |r, row| {
        let (b, t) = (r / l, r % l);
        for h in 0..g.heads {
            let s = ((b * g.heads + h) * l + t) * dh;
            row[col_offset + h * dh..col_offset + (h + 1) * dh].copy_from_slice(&src[s..s + dh]);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bdr_without_dropout() {
        let x = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::new(&[2, 2], vec![0.5f64, 0.5, -1.0, -1.0]).unwrap();
        let (y, m) = bias_dropout_residual(&x, &[10.0, 20.0], &r, 0.0, 3).unwrap();
        assert_eq!(y.data(), &[11.5, 22.5, 12.0, 23.0]);
        assert_eq!(m.keep.count_ones(), 4);
    }

    #[test]
    fn bdr_zero_branch_is_residual() {
        let x = Tensor::<f32>::zeros(&[3, 5]).unwrap();
        let r = Tensor::from_fn(&[3, 5], |i| i as f32 * 0.25).unwrap();
        for seed in 0..5 {
            let (y, _) = bias_dropout_residual(&x, &[0.0; 5], &r, 0.7, seed).unwrap();
            assert_eq!(y, r);
        }
    }

    #[test]
    fn brd_relu_mask() {
        let x = Tensor::new(&[1, 2], vec![-1.5f64, 1.0]).unwrap();
        let (y, _, relu) = bias_relu_dropout(&x, &[0.5, 1.0], 0.0, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        assert_eq!(relu.to_bools(), vec![false, true]);
        let (y, _, relu) = bias_relu_dropout(&x, &[-5.0, -5.0], 0.5, 9).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(relu.count_ones(), 0);
    }

    #[test]
    fn relu_mask_spans_many_words() {
        let x =
            Tensor::<f32>::from_fn(&[7, 1000], |i| if i % 3 == 0 { 1.0 } else { -1.0 }).unwrap();
        let (_, _, relu) = bias_relu_dropout(&x, &vec![0.0; 1000], 0.0, 0).unwrap();
        for i in 0..7000 {
            assert_eq!(relu.get(i), i % 3 == 0);
        }
    }

    #[test]
    fn heads_roundtrip() {
        let g = Heads {
            batch: 2,
            len: 3,
            heads: 2,
            head_dim: 2,
        };
        let src: Vec<f64> = (0..2 * 3 * 8).map(|i| i as f64).collect();
        let mut q = vec![0.0; g.elements()];
        split_heads_bias(&src, 8, 4, &[0.0; 4], g, &mut q);
        // b=0, h=1, t=2 starts at column 4 + 2 of row 2.
        assert_eq!(q[(3 + 2) * 2], src[2 * 8 + 6]);
        let mut back = vec![0.0; 6 * 8];
        merge_heads(&q, g, &mut back, 8, 4);
        for r in 0..6 {
            assert_eq!(&back[r * 8 + 4..r * 8 + 8], &src[r * 8 + 4..r * 8 + 8]);
        }
    }
}
