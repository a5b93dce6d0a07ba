//! LayerNorm forward with single-pass statistics.
//!
//! Per row, Σx and Σx² are accumulated in the same traversal and the
//! standard deviation is `sqrt(E[x²] - E[x]² + eps)`.

use crate::error::{Error, Result};
use crate::numerics::reduce::pairwise_shifted_moments;
use crate::numerics::{b16_to_b32, b32_to_b16, Half, Real, Tensor};
use crate::par;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-row statistics saved for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LNCache<T> {
    pub mu: Vec<T>,
    /// Standard deviation including eps.
    pub sigma: Vec<T>,
    pub xhat: Option<Vec<T>>,
}

/// Row statistics `(mu, sigma)`. `sigma` is zero for a degenerate row.
///
/// One pass over the row, shifted by its first element so that a row whose
/// spread is small next to its mean does not lose the variance to
/// cancellation.
#[inline]
pub fn row_stats<T: Real>(x: &[T], eps: T) -> (T, T) {
    let m = T::from_usize(x.len());
    let k = x.first().copied().unwrap_or_else(T::zero);
    let (s, s2) = pairwise_shifted_moments(x, k);
    let d = s / m;
    // Rounding can still push the difference slightly below zero.
    let var = (s2 / m - d * d).max(T::zero());
    (k + d, (var + eps).sqrt())
}

/// Slice-level forward. `x` and `y` are `rows x m`; `mu`/`sigma` hold one
/// value per row.
pub fn layernorm_forward_into<T: Real>(
    x: &[T],
    m: usize,
    w: &[T],
    b: &[T],
    eps: f64,
    y: &mut [T],
    mu: &mut [T],
    sigma: &mut [T],
) -> Result<()> {
    if m < 2
        || w.len() != m
        || b.len() != m
        || x.len() != y.len()
        || !x.len().is_multiple_of(m)
        || mu.len() != x.len() / m
    {
        return Err(Error::ShapeMismatch(format!("layernorm row width {m}")));
    }
    let eps_t = T::from_f64(eps);
    par::for_each_row3(y, m, mu, 1, sigma, 1, |r, yr, mr, sr| {
        let xr = &x[r * m..(r + 1) * m];
        let (mean, sd) = row_stats(xr, eps_t);
        mr[0] = mean;
        sr[0] = sd;
        if sd > T::zero() {
            let inv = T::one() / sd;
            for j in 0..m {
                yr[j] = w[j] * ((xr[j] - mean) * inv) + b[j];
            }
        }
    });
    if let Some(row) = sigma.iter().position(|&s| s <= T::zero()) {
        return Err(Error::DegenerateRow { row });
    }
    Ok(())
}

/// Tensor-level forward over the last dimension.
pub fn layernorm_forward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    b: &[T],
    eps: f64,
) -> Result<(Tensor<T>, LNCache<T>)> {
    if eps < 0.0 {
        return Err(Error::InvalidConfig(format!("layernorm eps {eps} < 0")));
    }
    let m = x.cols();
    let rows = x.rows();
    let mut y = Tensor::zeros(x.shape())?;
    let mut mu = vec![T::zero(); rows];
    let mut sigma = vec![T::zero(); rows];
    layernorm_forward_into(x.data(), m, w, b, eps, y.data_mut(), &mut mu, &mut sigma)?;
    Ok((
        y,
        LNCache {
            mu,
            sigma,
            xhat: None,
        },
    ))
}

/// binary16 storage with binary32 arithmetic: inputs are widened per row,
/// normalised in f32 and narrowed on store.
pub fn layernorm_forward_half(
    x: &Tensor<Half>,
    w: &[Half],
    b: &[Half],
    eps: f64,
) -> Result<(Tensor<Half>, LNCache<f32>)> {
    let w32: Vec<f32> = w.iter().map(|&h| b16_to_b32(h)).collect();
    let b32: Vec<f32> = b.iter().map(|&h| b16_to_b32(h)).collect();
    let (y, cache) = layernorm_forward(&x.to_f32(), &w32, &b32, eps)?;
    Ok((y.map(b32_to_b16), cache))
}

impl<T: Real> LNCache<T> {
    /// Fills `xhat` from the input the cache was built on.
    pub fn with_xhat(mut self, x: &[T]) -> Self {
        let m = x.len() / self.mu.len();
        let xhat = x
            .chunks(m)
            .zip(self.mu.iter().zip(&self.sigma))
            .flat_map(|(row, (&mu, &sd))| row.iter().map(move |&v| (v - mu) / sd))
            .collect();
        self.xhat = Some(xhat);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair() {
        let x = Tensor::new(&[1, 2], vec![1.0f64, -1.0]).unwrap();
        let (y, c) = layernorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
        assert_eq!(c.mu, vec![0.0]);
        assert_eq!(c.sigma, vec![1.0]);
    }

    #[test]
    fn constant_row_gives_bias() {
        let x = Tensor::new(&[1, 4], vec![3.5f32; 4]).unwrap();
        let b = [0.1, -0.2, 0.3, 0.4];
        let (y, _) = layernorm_forward(&x, &[2.0, 3.0, 4.0, 5.0], &b, 1e-5).unwrap();
        assert_eq!(y.data(), &b);
    }

    #[test]
    fn degenerate_row_without_eps() {
        let x = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 5.0, 5.0]).unwrap();
        assert_eq!(
            layernorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap_err(),
            Error::DegenerateRow { row: 1 }
        );
    }

    #[test]
    fn one_to_four() {
        // Two-pass binary64 reference: mean 2.5, population variance 1.25.
        let x = Tensor::new(&[1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, c) = layernorm_forward(&x, &[1.0; 4], &[0.0; 4], 0.0).unwrap();
        let want = [
            -1.341_640_786_499_874,
            -0.447_213_595_499_958,
            0.447_213_595_499_958,
            1.341_640_786_499_874,
        ];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((c.sigma[0] - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn half_storage() {
        let x = Tensor::new(&[1, 4], vec![1.0f32, 2.0, 3.0, 4.0])
            .unwrap()
            .to_half();
        let one = [Half::ONE; 4];
        let zero = [Half::ZERO; 4];
        let (y, c) = layernorm_forward_half(&x, &one, &zero, 0.0).unwrap();
        assert_eq!(y.data()[3], b32_to_b16(1.341_640_8));
        assert!((c.sigma[0] - 1.118_034).abs() < 1e-6);
    }
}
