use crate::error::{Error, Result};
use crate::kernels::softmax::SoftmaxCache;
use crate::numerics::reduce::pairwise_dot;
use crate::numerics::{Real, Tensor};
use crate::par;

/// `dx_i = q_i * (dy_i - Σ_j dy_j q_j)` for `rows x cols` slices.
/// Masked positions have `q_i = 0` and so receive zero.
pub fn softmax_backward_into<T: Real>(dy: &[T], probs: &[T], cols: usize, dx: &mut [T]) {
    par::for_each_row(dx, cols, |r, out| {
        let (g, q) = (
            &dy[r * cols..(r + 1) * cols],
            &probs[r * cols..(r + 1) * cols],
        );
        let dot = pairwise_dot(g, q);
        for j in 0..cols {
            out[j] = q[j] * (g[j] - dot);
        }
    });
}

/// In-place variant: `g` holds dy on entry and dx on exit.
pub fn softmax_backward_in_place<T: Real>(g: &mut [T], probs: &[T], cols: usize) {
    par::for_each_row(g, cols, |r, row| {
        let q = &probs[r * cols..(r + 1) * cols];
        let dot = pairwise_dot(row, q);
        for j in 0..cols {
            row[j] = q[j] * (row[j] - dot);
        }
    });
}

pub fn softmax_backward<T: Real>(dy: &Tensor<T>, cache: &SoftmaxCache<T>) -> Result<Tensor<T>> {
    if dy.shape() != cache.probs.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dy {:?} vs probs {:?}",
            dy.shape(),
            cache.probs.shape()
        )));
    }
    let mut dx = Tensor::zeros(dy.shape())?;
    softmax_backward_into(dy.data(), cache.probs.data(), dy.cols(), dx.data_mut());
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::softmax::{softmax_forward, AttentionMask};

    #[test]
    fn constant_upstream_vanishes() {
        let x = Tensor::new(&[1, 4], vec![0.1f64, -0.3, 2.0, 0.7]).unwrap();
        let (_, cache) = softmax_forward(&x, &AttentionMask::None).unwrap();
        let dy = Tensor::full(&[1, 4], 3.0).unwrap();
        let dx = softmax_backward(&dy, &cache).unwrap();
        assert!(dx.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn one_hot_probs_vanish() {
        let cache = SoftmaxCache {
            probs: Tensor::new(&[1, 3], vec![0.0f64, 1.0, 0.0]).unwrap(),
        };
        let dy = Tensor::new(&[1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        let dx = softmax_backward(&dy, &cache).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatch() {
        let cache = SoftmaxCache {
            probs: Tensor::<f32>::zeros(&[2, 3]).unwrap(),
        };
        assert!(softmax_backward(&Tensor::zeros(&[3, 2]).unwrap(), &cache).is_err());
    }
}
