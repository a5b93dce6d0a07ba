//! Three-step stable softmax and log-softmax.
//!
//! Step 1 takes the row maximum x' over unmasked entries, step 2 forms
//! Z = Σ exp(x_j - x'), step 3 writes exp(x_i - x') / Z. Masked entries
//! are written as exact zeros.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::numerics::reduce::{self, pairwise_sum, pairwise_sum_map_par};
use crate::numerics::{Real, Tensor};
use crate::par;

/// Which keys each query row may attend to. Every supported mask keeps a
/// prefix of the key axis.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum AttentionMask {
    #[default]
    None,
    /// Query `q` sees keys `0..=q`.
    Causal,
    /// Batch element `b` sees keys `0..lens[b]`.
    Padding(Vec<usize>),
    /// Both constraints.
    CausalPadding(Vec<usize>),
}

/// How rows of a score tensor map onto (batch, query) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowLayout {
    pub batch: usize,
    /// Rows per batch element (heads * queries).
    pub rows_per_batch: usize,
    pub queries: usize,
    pub cols: usize,
}

impl RowLayout {
    /// Layout for a tensor `[B, (N,) Lq, Lk]`; rank 2 is a single batch
    /// whose rows are the queries.
    pub fn of_shape(shape: &[usize]) -> Result<Self> {
        let r = shape.len();
        if r < 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax needs rank >= 2, got {shape:?}"
            )));
        }
        let cols = shape[r - 1];
        let queries = shape[r - 2];
        let rows: usize = shape[..r - 1].iter().product();
        let batch = if r == 2 { 1 } else { shape[0] };
        Ok(Self {
            batch,
            rows_per_batch: rows / batch,
            queries,
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.rows_per_batch
    }
}

impl AttentionMask {
    /// Number of leading keys visible to row `row`.
    #[inline]
    pub fn limit(&self, layout: &RowLayout, row: usize) -> usize {
        let b = row / layout.rows_per_batch;
        let q = row % layout.queries;
        match self {
            AttentionMask::None => layout.cols,
            AttentionMask::Causal => (q + 1).min(layout.cols),
            AttentionMask::Padding(lens) => lens[b].min(layout.cols),
            AttentionMask::CausalPadding(lens) => lens[b].min(q + 1).min(layout.cols),
        }
    }

    pub fn validate(&self, layout: &RowLayout) -> Result<()> {
        if let AttentionMask::Padding(lens) | AttentionMask::CausalPadding(lens) = self {
            if lens.len() != layout.batch {
                return Err(Error::ShapeMismatch(format!(
                    "{} padding lengths for batch {}",
                    lens.len(),
                    layout.batch
                )));
            }
            if let Some(b) = lens.iter().position(|&l| l == 0 || l > layout.cols) {
                return Err(Error::AllMaskedRow {
                    row: b * layout.rows_per_batch,
                });
            }
        }
        Ok(())
    }
}

/// The forward output, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxCache<T> {
    pub probs: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SoftmaxStrategy {
    /// One task per row, rows in parallel.
    RowSerial,
    /// Rows one at a time, each row's reductions split across tasks.
    RowParallelTree,
}

pub const SERIAL_MAX_COLS: usize = 4096;

fn tuned() -> &'static Mutex<HashMap<(usize, usize), SoftmaxStrategy>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), SoftmaxStrategy>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Picks a strategy for a `rows x cols` problem. Without autotuning the
/// rule is width-based; with it both strategies are timed once on a
/// synthetic batch of that shape and the winner is cached.
pub fn select_softmax_strategy(rows: usize, cols: usize, autotune: bool) -> SoftmaxStrategy {
    if !autotune {
        return if cols <= SERIAL_MAX_COLS {
            SoftmaxStrategy::RowSerial
        } else {
            SoftmaxStrategy::RowParallelTree
        };
    }
    if let Some(&s) = tuned().lock().unwrap().get(&(rows, cols)) {
        return s;
    }
    // Cap the probe so very large shapes still tune quickly.
    let probe_rows = rows.min((1 << 22) / cols.max(1)).max(1);
    let x: Vec<f32> = (0..probe_rows * cols)
        .map(|i| ((i * 2_654_435_761) % 1000) as f32 * 1e-2)
        .collect();
    let layout = RowLayout {
        batch: 1,
        rows_per_batch: probe_rows,
        queries: probe_rows,
        cols,
    };
    let mut y = vec![0.0f32; x.len()];
    let mut time = |s| {
        let _ = softmax_rows_into(&x, layout, &AttentionMask::None, s, &mut y);
        let t0 = Instant::now();
        let _ = softmax_rows_into(&x, layout, &AttentionMask::None, s, &mut y);
        t0.elapsed()
    };
    let serial = time(SoftmaxStrategy::RowSerial);
    let tree = time(SoftmaxStrategy::RowParallelTree);
    let best = if tree < serial {
        SoftmaxStrategy::RowParallelTree
    } else {
        SoftmaxStrategy::RowSerial
    };
    tuned().lock().unwrap().insert((rows, cols), best);
    best
}

#[inline]
fn softmax_row_serial<T: Real>(x: &[T], limit: usize, y: &mut [T]) {
    let xmax = reduce::max(&x[..limit]);
    for j in 0..limit {
        y[j] = (x[j] - xmax).exp();
    }
    let z = pairwise_sum(&y[..limit]);
    let inv = T::one() / z;
    for v in &mut y[..limit] {
        *v *= inv;
    }
    y[limit..].fill(T::zero());
}

fn softmax_row_tree<T: Real>(x: &[T], limit: usize, y: &mut [T]) {
    let chunk = 4096;
    let xs = &x[..limit];
    let partial_max = par::map_blocks(limit, chunk, |r| reduce::max(&xs[r]));
    let xmax = partial_max.into_iter().fold(T::neg_infinity(), T::max);
    par::for_each_row(&mut y[..limit], chunk, |i, yr| {
        let off = i * chunk;
        for (k, v) in yr.iter_mut().enumerate() {
            *v = (xs[off + k] - xmax).exp();
        }
    });
    let z = pairwise_sum_map_par(&y[..limit], |v| v);
    let inv = T::one() / z;
    par::for_each_row(&mut y[..limit], chunk, |_, yr| {
        yr.iter_mut().for_each(|v| *v *= inv)
    });
    y[limit..].fill(T::zero());
}

/// Slice-level masked softmax over rows of `layout.cols`.
pub fn softmax_rows_into<T: Real>(
    x: &[T],
    layout: RowLayout,
    mask: &AttentionMask,
    strategy: SoftmaxStrategy,
    y: &mut [T],
) -> Result<()> {
    mask.validate(&layout)?;
    let cols = layout.cols;
    match strategy {
        SoftmaxStrategy::RowSerial => par::for_each_row(y, cols, |r, yr| {
            softmax_row_serial(&x[r * cols..(r + 1) * cols], mask.limit(&layout, r), yr)
        }),
        SoftmaxStrategy::RowParallelTree => {
            for (r, yr) in y.chunks_mut(cols).enumerate() {
                softmax_row_tree(&x[r * cols..(r + 1) * cols], mask.limit(&layout, r), yr);
            }
        }
    }
    Ok(())
}

/// Tensor-level softmax over the last axis using the default strategy rule.
pub fn softmax_forward<T: Real>(
    x: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<(Tensor<T>, SoftmaxCache<T>)> {
    let strategy = select_softmax_strategy(x.rows(), x.cols(), false);
    softmax_forward_with(x, mask, strategy)
}

pub fn softmax_forward_with<T: Real>(
    x: &Tensor<T>,
    mask: &AttentionMask,
    strategy: SoftmaxStrategy,
) -> Result<(Tensor<T>, SoftmaxCache<T>)> {
    let layout = RowLayout::of_shape(x.shape())?;
    let mut y = Tensor::zeros(x.shape())?;
    softmax_rows_into(x.data(), layout, mask, strategy, y.data_mut())?;
    let cache = SoftmaxCache { probs: y.clone() };
    Ok((y, cache))
}

/// `logq_i = (h_i - x') - ln Z` for one row; returns `(x', ln Z)`.
#[inline]
pub fn log_softmax_row<T: Real>(h: &[T], out: &mut [T]) -> (T, T) {
    let xmax = reduce::max(h);
    let z = crate::numerics::reduce::pairwise_sum_map(h, |v| (v - xmax).exp());
    let log_z = z.ln();
    for (o, &v) in out.iter_mut().zip(h) {
        *o = (v - xmax) - log_z;
    }
    (xmax, log_z)
}

/// In-place variant of [`log_softmax_row`].
#[inline]
pub fn log_softmax_row_in_place<T: Real>(h: &mut [T]) {
    let xmax = reduce::max(h);
    let log_z = crate::numerics::reduce::pairwise_sum_map(h, |v| (v - xmax).exp()).ln();
    for v in h.iter_mut() {
        *v = (*v - xmax) - log_z;
    }
}

/// Row-wise log-softmax over the last axis. Never materialises `q`.
pub fn log_softmax_forward<T: Real>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let v = h.cols();
    if v < 2 {
        return Err(Error::ShapeMismatch(format!(
            "log-softmax needs at least 2 classes, got {v}"
        )));
    }
    let mut out = Tensor::zeros(h.shape())?;
    let hd = h.data();
    par::for_each_row(out.data_mut(), v, |r, o| {
        log_softmax_row(&hd[r * v..(r + 1) * v], o);
    });
    Ok(out)
}
