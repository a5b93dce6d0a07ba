//! LayerNorm backward in the rearranged two-reduction form.
//!
//! With `g = dy` and per-row statistics `mu`, `sigma` (eps included):
//!
//! ```text
//! dx_i = w_i g_i / sigma + a_i * Σ_j w_j g_j + b_i * Σ_j w_j g_j x_j
//! a_i  = ((x_i - mu) mu - sigma²) / (m sigma³)
//! b_i  = (mu - x_i) / (m sigma³)
//! ```
//!
//! Both row sums come out of one traversal; the per-element coefficients
//! depend only on `x_i` and the row statistics.
//!
//! The form is unchanged by shifting `x` and `mu` by a common constant. The
//! fast path evaluates it with `x` centred on `mu` (so `mu` becomes 0),
//! because with raw `x` the `a_i` and `b_i` terms cancel when `|mu|` is
//! large next to `sigma`. [`layernorm_backward_scratch`] keeps the raw
//! coordinates for inspection.

use crate::error::{Error, Result};
use crate::kernels::layernorm::LNCache;
use crate::numerics::{Real, Tensor};
use crate::par;

/// Row reductions and per-element coefficients of the rearranged form.
#[derive(Clone, Debug, PartialEq)]
pub struct LNBackwardScratch<T> {
    /// Σ_j w_j g_j per row.
    pub red1: Vec<T>,
    /// Σ_j w_j g_j x_j per row.
    pub red2: Vec<T>,
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

#[inline]
fn row_reductions<T: Real>(g: &[T], x: &[T], w: &[T], shift: T) -> (T, T) {
    fn go<T: Real>(g: &[T], x: &[T], w: &[T], k: T) -> (T, T) {
        if g.len() <= crate::numerics::reduce::PAIRWISE_LEAF {
            let (mut r1, mut r2) = (T::zero(), T::zero());
            for j in 0..g.len() {
                let wg = w[j] * g[j];
                r1 += wg;
                r2 += wg * (x[j] - k);
            }
            (r1, r2)
        } else {
            let h = g.len() / 2;
            let (a1, a2) = go(&g[..h], &x[..h], &w[..h], k);
            let (b1, b2) = go(&g[h..], &x[h..], &w[h..], k);
            (a1 + b1, a2 + b2)
        }
    }
    go(g, x, w, shift)
}

#[inline]
fn coefficients<T: Real>(xi: T, mu: T, sigma: T, m: T) -> (T, T) {
    let denom = m * sigma * sigma * sigma;
    (((xi - mu) * mu - sigma * sigma) / denom, (mu - xi) / denom)
}

/// Computes the scratch values explicitly (for inspection and tests).
pub fn layernorm_backward_scratch<T: Real>(
    dy: &[T],
    x: &[T],
    m: usize,
    w: &[T],
    mu: &[T],
    sigma: &[T],
) -> LNBackwardScratch<T> {
    let rows = x.len() / m;
    let mt = T::from_usize(m);
    let mut s = LNBackwardScratch {
        red1: vec![],
        red2: vec![],
        alpha: vec![],
        beta: vec![],
    };
    for r in 0..rows {
        let (r1, r2) = row_reductions(
            &dy[r * m..(r + 1) * m],
            &x[r * m..(r + 1) * m],
            w,
            T::zero(),
        );
        s.red1.push(r1);
        s.red2.push(r2);
        for &xi in &x[r * m..(r + 1) * m] {
            let (a, b) = coefficients(xi, mu[r], sigma[r], mt);
            s.alpha.push(a);
            s.beta.push(b);
        }
    }
    s
}

/// Input gradient only, written to `dx` (`rows x m`).
pub fn layernorm_backward_dx_into<T: Real>(
    dy: &[T],
    x: &[T],
    m: usize,
    w: &[T],
    mu: &[T],
    sigma: &[T],
    dx: &mut [T],
) {
    let mt = T::from_usize(m);
    par::for_each_row(dx, m, |r, out| {
        let (g, xr) = (&dy[r * m..(r + 1) * m], &x[r * m..(r + 1) * m]);
        let (mean, sd) = (mu[r], sigma[r]);
        let (red1, red2) = row_reductions(g, xr, w, mean);
        let inv = T::one() / sd;
        for i in 0..m {
            let (a, b) = coefficients(xr[i] - mean, T::zero(), sd, mt);
            out[i] = w[i] * g[i] * inv + a * red1 + b * red2;
        }
    });
}

/// `dw_i = Σ_rows g_i x̂_i`, `db_i = Σ_rows g_i`, accumulated into `dw`, `db`
/// (overwritten) through fixed row blocks merged pairwise.
pub fn layernorm_param_grads_into<T: Real>(
    dy: &[T],
    x: &[T],
    m: usize,
    mu: &[T],
    sigma: &[T],
    dw: &mut [T],
    db: &mut [T],
) {
    let rows = x.len() / m;
    let partials = par::map_blocks(rows, par::REDUCE_BLOCK_ROWS, |range| {
        let mut acc = vec![T::zero(); 2 * m];
        for r in range {
            let inv = T::one() / sigma[r];
            for i in 0..m {
                let g = dy[r * m + i];
                acc[i] += g * ((x[r * m + i] - mu[r]) * inv);
                acc[m + i] += g;
            }
        }
        acc
    });
    let total = par::tree_merge(partials, |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
        a
    })
    .unwrap_or_else(|| vec![T::zero(); 2 * m]);
    dw.copy_from_slice(&total[..m]);
    db.copy_from_slice(&total[m..]);
}

/// Returns `(dx, dw, db)`.
pub fn layernorm_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &[T],
    cache: &LNCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let m = x.cols();
    if dy.shape() != x.shape()
        || w.len() != m
        || cache.mu.len() != x.rows()
        || cache.sigma.len() != x.rows()
    {
        return Err(Error::ShapeMismatch("layernorm backward operands".into()));
    }
    if let Some(row) = cache.sigma.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::DegenerateRow { row });
    }
    let mut dx = Tensor::zeros(x.shape())?;
    let mut dw = vec![T::zero(); m];
    let mut db = vec![T::zero(); m];
    layernorm_backward_dx_into(
        dy.data(),
        x.data(),
        m,
        w,
        &cache.mu,
        &cache.sigma,
        dx.data_mut(),
    );
    layernorm_param_grads_into(
        dy.data(),
        x.data(),
        m,
        &cache.mu,
        &cache.sigma,
        &mut dw,
        &mut db,
    );
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::layernorm::layernorm_forward;

    fn rand_row(seed: u64, m: usize) -> Vec<f64> {
        (0..m)
            .map(|i| crate::numerics::rand_uniform(seed, i as u64) * 4.0 - 2.0)
            .collect()
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        for seed in 0..20 {
            let x = Tensor::new(&[1, 8], rand_row(seed, 8)).unwrap();
            let w = rand_row(seed + 100, 8);
            let (_, cache) = layernorm_forward(&x, &w, &[0.0; 8], 1e-5).unwrap();
            let dy = Tensor::new(&[1, 8], rand_row(seed + 200, 8)).unwrap();
            let (dx, _, _) = layernorm_backward(&dy, &x, &w, &cache).unwrap();
            assert!(dx.data().iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_direction_is_annihilated() {
        let x = Tensor::new(&[1, 6], rand_row(7, 6)).unwrap();
        let (_, cache) = layernorm_forward(&x, &[1.0; 6], &[0.0; 6], 0.0).unwrap();
        let cache = cache.with_xhat(x.data());
        let dy = Tensor::new(&[1, 6], cache.xhat.clone().unwrap()).unwrap();
        let (dx, _, _) = layernorm_backward(&dy, &x, &[1.0; 6], &cache).unwrap();
        assert!(dx.data().iter().all(|v| v.abs() < 1e-8), "{:?}", dx.data());
    }

    #[test]
    fn param_grads() {
        let x = Tensor::new(&[2, 2], vec![1.0f64, -1.0, 3.0, 5.0]).unwrap();
        let (_, cache) = layernorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        let dy = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, dw, db) = layernorm_backward(&dy, &x, &[1.0, 1.0], &cache).unwrap();
        // xhat rows are [1, -1] and [-1, 1].
        assert_eq!(dw, vec![1.0 - 3.0, -2.0 + 4.0]);
        assert_eq!(db, vec![4.0, 6.0]);
    }

    #[test]
    fn scratch_matches_fast_path() {
        let x = rand_row(1, 5);
        let w = rand_row(2, 5);
        let g = rand_row(3, 5);
        let xt = Tensor::new(&[1, 5], x.clone()).unwrap();
        let (_, c) = layernorm_forward(&xt, &w, &[0.0; 5], 1e-5).unwrap();
        let s = layernorm_backward_scratch(&g, &x, 5, &w, &c.mu, &c.sigma);
        let mut dx = vec![0.0; 5];
        layernorm_backward_dx_into(&g, &x, 5, &w, &c.mu, &c.sigma, &mut dx);
        for i in 0..5 {
            let v =
                w[i] * g[i] * (1.0 / c.sigma[0]) + s.alpha[i] * s.red1[0] + s.beta[i] * s.red2[0];
            assert!(
                (v - dx[i]).abs() < 1e-12 * dx[i].abs().max(1.0),
                "{v} vs {}",
                dx[i]
            );
        }
    }

    #[test]
    fn offset_rows_keep_binary32_precision() {
        let m = 8;
        let x64: Vec<f64> = rand_row(4, m).iter().map(|v| 20.0 + 0.5 * v).collect();
        let w64 = rand_row(5, m);
        let g64 = rand_row(6, m);
        let x32: Vec<f32> = x64.iter().map(|&v| v as f32).collect();
        let w32: Vec<f32> = w64.iter().map(|&v| v as f32).collect();
        let g32: Vec<f32> = g64.iter().map(|&v| v as f32).collect();
        let x64: Vec<f64> = x32.iter().map(|&v| v as f64).collect();
        let w64: Vec<f64> = w32.iter().map(|&v| v as f64).collect();
        let g64: Vec<f64> = g32.iter().map(|&v| v as f64).collect();
        let (_, c32) = layernorm_forward(
            &Tensor::new(&[1, m], x32.clone()).unwrap(),
            &w32,
            &[0.0; 8],
            1e-5,
        )
        .unwrap();
        let (_, c64) = layernorm_forward(
            &Tensor::new(&[1, m], x64.clone()).unwrap(),
            &w64,
            &[0.0; 8],
            1e-5,
        )
        .unwrap();
        let mut d32 = vec![0.0f32; m];
        let mut d64 = vec![0.0f64; m];
        layernorm_backward_dx_into(&g32, &x32, m, &w32, &c32.mu, &c32.sigma, &mut d32);
        layernorm_backward_dx_into(&g64, &x64, m, &w64, &c64.mu, &c64.sigma, &mut d64);
        for i in 0..m {
            let rel = (d32[i] as f64 - d64[i]).abs() / d64[i].abs().max(1.0);
            assert!(rel < 1e-5, "element {i}: {} vs {}", d32[i], d64[i]);
        }
    }
}
