//! Plain row-parallel GEMM.
//!
//! Each output row is produced by one task with a fixed inner-loop order, so
//! results do not depend on the thread count.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::par;

/// Problem size: C is `m x n`, the shared dimension is `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// `C (+)= op(A) * op(B)`.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), both row-major. With `accumulate` the product is added
/// to the existing contents of `c`.
pub fn gemm_into<T: Real>(
    dims: GemmDims,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let GemmDims { m, n, k } = dims;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_row(c, n, |i, row| {
        gemm_row(i, m, n, k, a, trans_a, b, trans_b, row, accumulate)
    });
}

/// Same as [`gemm_into`] on the calling thread. Used inside batched kernels
/// that already parallelise over the batch.
pub fn gemm_into_serial<T: Real>(
    dims: GemmDims,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let GemmDims { m, n, k } = dims;
    for (i, row) in c.chunks_mut(n).enumerate() {
        gemm_row(i, m, n, k, a, trans_a, b, trans_b, row, accumulate);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_row<T: Real>(
    i: usize,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    row: &mut [T],
    accumulate: bool,
) {
    let a_at = |p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };
    if trans_b {
        // row[j] = <A_i, B_j>
        for (j, out) in row.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (p, &bv) in bj.iter().enumerate() {
                acc += a_at(p) * bv;
            }
            *out = if accumulate { *out + acc } else { acc };
        }
    } else {
        if !accumulate {
            row.fill(T::zero());
        }
        // row += a_ip * B_p, p ascending
        for p in 0..k {
            let aip = a_at(p);
            if aip == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += aip * bv;
            }
        }
    }
}

/// Tensor-level GEMM over rank-2 operands.
pub fn gemm<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    accumulate_into: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "gemm needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = if trans_a {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "gemm inner dims {ka} vs {kb}"
        )));
    }
    let mut c = match accumulate_into {
        Some(c0) if c0.shape() != [m, n] => {
            return Err(Error::ShapeMismatch(format!(
                "gemm accumulator {:?} vs [{m}, {n}]",
                c0.shape()
            )));
        }
        Some(c0) => c0.clone(),
        None => Tensor::zeros(&[m, n])?,
    };
    gemm_into(
        GemmDims { m, n, k: ka },
        a.data(),
        trans_a,
        b.data(),
        trans_b,
        c.data_mut(),
        accumulate_into.is_some(),
    );
    Ok(c)
}

/// `count` independent GEMMs over contiguous operand batches.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm_into<T: Real>(
    count: usize,
    dims: GemmDims,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
    debug_assert_eq!(c.len(), count * sc);
    par::for_each_row(c, sc, |i, ci| {
        gemm_into_serial(
            dims,
            &a[i * sa..(i + 1) * sa],
            trans_a,
            &b[i * sb..(i + 1) * sb],
            trans_b,
            ci,
            accumulate,
        )
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn two_by_two() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = gemm(&a, &b, false, false, None).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let acc = gemm(&a, &b, false, false, Some(&c)).unwrap();
        assert_eq!(acc.data(), &[38.0, 44.0, 86.0, 100.0]);
    }

    #[test]
    fn identity_and_transposes() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let eye =
            Tensor::<f64>::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(gemm(&a, &eye, false, false, None).unwrap(), a);

        let at = Tensor::<f64>::from_fn(&[4, 3], |i| a.data()[(i % 3) * 4 + i / 3]).unwrap();
        let b = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64 * 0.11).cos()).unwrap();
        let via_flag = gemm(&a, &b, true, false, None).unwrap();
        let direct = gemm(&at, &b, false, false, None).unwrap();
        for (x, y) in via_flag.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let bt = Tensor::<f64>::from_fn(&[5, 3], |i| b.data()[(i % 3) * 5 + i / 3]).unwrap();
        let via_b = gemm(&a, &bt, false, true, None);
        assert!(via_b.is_err());
        let via_b = gemm(&at, &bt, false, true, None).unwrap();
        let via_both = gemm(&a, &bt, true, true, None).unwrap();
        assert_eq!(via_b, via_both);
        for (x, y) in via_b.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatch_is_reported() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(
            gemm(&a, &b, false, false, None),
            Err(Error::ShapeMismatch(_))
        ));
        let bad_acc = Tensor::<f32>::zeros(&[3, 3]).unwrap();
        assert!(gemm(&a, &b, false, true, Some(&bad_acc)).is_err());
    }
}
