//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (on by default) the loops run on the current
//! rayon pool; without it they run on the calling thread. Results are
//! bit-identical either way: work is split by independent rows, and any
//! cross-row reduction goes through a fixed block partition whose partials
//! are merged by [`tree_merge`] in a fixed order.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per partial in cross-row reductions. Independent of thread count.
pub const REDUCE_BLOCK_ROWS: usize = 16;

/// Number of worker threads the helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f(row_index, row)` over consecutive `width`-sized rows of `data`.
pub fn for_each_row<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(width)
        .with_min_len(min_rows(width))
        .enumerate()
        .for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Like [`for_each_row`] but walks two buffers in lockstep.
pub fn for_each_row2<T, U, F>(a: &mut [T], wa: usize, b: &mut [U], wb: usize, f: F)
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
{
    if wa == 0 || wb == 0 {
        return;
    }
    debug_assert_eq!(a.len().div_ceil(wa), b.len().div_ceil(wb));
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(wa)
        .zip(b.par_chunks_mut(wb))
        .with_min_len(min_rows(wa))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(wa)
        .zip(b.chunks_mut(wb))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
}

/// Three-buffer variant of [`for_each_row`].
#[allow(clippy::too_many_arguments)]
pub fn for_each_row3<T, U, V, F>(
    a: &mut [T],
    wa: usize,
    b: &mut [U],
    wb: usize,
    c: &mut [V],
    wc: usize,
    f: F,
) where
    T: Send,
    U: Send,
    V: Send,
    F: Fn(usize, &mut [T], &mut [U], &mut [V]) + Sync + Send,
{
    if wa == 0 || wb == 0 || wc == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(wa)
        .zip(b.par_chunks_mut(wb))
        .zip(c.par_chunks_mut(wc))
        .with_min_len(min_rows(wa))
        .enumerate()
        .for_each(|(i, ((ra, rb), rc))| f(i, ra, rb, rc));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(wa)
        .zip(b.chunks_mut(wb))
        .zip(c.chunks_mut(wc))
        .enumerate()
        .for_each(|(i, ((ra, rb), rc))| f(i, ra, rb, rc));
}

/// Splits `data` into blocks of `block_rows` rows of `width` and evaluates
/// `f(first_row, block)` on each, returning the results in block order.
/// Used for one-traversal kernels that also produce per-block partial sums.
pub fn map_row_blocks_mut<T, R, F>(data: &mut [T], width: usize, block_rows: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    let chunk = (width * block_rows.max(1)).max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .map(|(i, c)| f(i * block_rows, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk)
            .enumerate()
            .map(|(i, c)| f(i * block_rows, c))
            .collect()
    }
}

/// Evaluates `f` on each block of `[0, n)` (blocks of `block` items) and
/// returns the results in block order.
pub fn map_blocks<R, F>(n: usize, block: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let block = block.max(1);
    let count = n.div_ceil(block);
    let range = move |i: usize| i * block..((i + 1) * block).min(n);
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(|i| f(range(i))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(|i| f(range(i))).collect()
    }
}

/// Evaluates `f(i)` for each `i` in `[0, n)`, results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs both closures, potentially in parallel.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Merges partial results pairwise: ((p0+p1)+(p2+p3))+... The tree shape
/// depends only on `parts.len()`.
pub fn tree_merge<R>(mut parts: Vec<R>, combine: impl Fn(R, R) -> R) -> Option<R> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

#[cfg(feature = "parallel")]
fn min_rows(width: usize) -> usize {
    // ~4k elements per task keeps scheduling overhead negligible.
    (4096 / width.max(1)).max(1)
}
