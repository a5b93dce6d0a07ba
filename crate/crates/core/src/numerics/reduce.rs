//! Fixed-shape pairwise reductions.
//!
//! The tree is a function of the input length only: leaves of at most
//! [`PAIRWISE_LEAF`] elements summed left to right, internal nodes split at
//! `len / 2`. Serial and parallel evaluations walk the same tree, so they
//! agree bit for bit.

use super::Real;
use crate::par;

pub const PAIRWISE_LEAF: usize = 32;

/// Minimum length before the parallel variants fork.
const PAR_SPLIT: usize = 8192;

pub fn pairwise_sum<T: Real>(x: &[T]) -> T {
    pairwise_sum_map(x, |v| v)
}

/// Σ f(x_i) over the fixed tree.
pub fn pairwise_sum_map<T: Real, F: Fn(T) -> T>(x: &[T], f: F) -> T {
    fn go<T: Real, F: Fn(T) -> T>(x: &[T], f: &F) -> T {
        if x.len() <= PAIRWISE_LEAF {
            let mut acc = T::zero();
            for &v in x {
                acc += f(v);
            }
            acc
        } else {
            let (a, b) = x.split_at(x.len() / 2);
            go(a, f) + go(b, f)
        }
    }
    go(x, &f)
}

/// Σ f(x_i), forking at the upper levels of the same tree.
pub fn pairwise_sum_map_par<T, F>(x: &[T], f: F) -> T
where
    T: Real,
    F: Fn(T) -> T + Sync + Send,
{
    fn go<T: Real, F: Fn(T) -> T + Sync + Send>(x: &[T], f: &F) -> T {
        if x.len() <= PAR_SPLIT {
            return pairwise_sum_map(x, f);
        }
        let (a, b) = x.split_at(x.len() / 2);
        let (sa, sb) = par::join(|| go(a, f), || go(b, f));
        sa + sb
    }
    go(x, &f)
}

/// Σx and Σx² accumulated together in one traversal.
pub fn pairwise_moments<T: Real>(x: &[T]) -> (T, T) {
    pairwise_shifted_moments(x, T::zero())
}

/// Σ(x-k) and Σ(x-k)² in one traversal. A shift near the mean keeps
/// `Σ(x-k)²/n - (Σ(x-k)/n)²` from cancelling.
pub fn pairwise_shifted_moments<T: Real>(x: &[T], k: T) -> (T, T) {
    if x.len() <= PAIRWISE_LEAF {
        let mut s = T::zero();
        let mut s2 = T::zero();
        for &v in x {
            let c = v - k;
            s += c;
            s2 += c * c;
        }
        (s, s2)
    } else {
        let (a, b) = x.split_at(x.len() / 2);
        let (sa, sa2) = pairwise_shifted_moments(a, k);
        let (sb, sb2) = pairwise_shifted_moments(b, k);
        (sa + sb, sa2 + sb2)
    }
}

/// Σ a_i·b_i over the fixed tree.
pub fn pairwise_dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_LEAF {
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    } else {
        let mid = a.len() / 2;
        pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
    }
}

/// Maximum, ignoring NaN ordering subtleties (inputs are finite).
pub fn max<T: Real>(x: &[T]) -> T {
    x.iter().copied().fold(T::neg_infinity(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serial_and_parallel_trees_agree() {
        let x: Vec<f32> = (0..100_003)
            .map(|i| ((i * 7919) % 1000) as f32 * 1e-3 + 0.1)
            .collect();
        let a = pairwise_sum_map(&x, |v| v.exp());
        let b = pairwise_sum_map_par(&x, |v| v.exp());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn moments_match_sums() {
        let x: Vec<f64> = (0..77).map(|i| i as f64 * 0.5).collect();
        let (s, s2) = pairwise_moments(&x);
        assert_eq!(s, pairwise_sum(&x));
        assert_eq!(s2, pairwise_sum_map(&x, |v| v * v));
        assert_eq!(pairwise_dot(&x, &x), s2);
    }
}
