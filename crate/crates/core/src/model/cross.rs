//! Layer-batched cross-attention projections.
//!
//! The key and value projections of all `n` decoder layers are stacked into
//! one `[2nd x d]` matrix (`[K_0; ..; K_{n-1}; V_0; ..; V_{n-1}]`), so the
//! encoder output is projected by a single GEMM and split afterwards. In the
//! backward pass each decoder layer deposits its key/value gradient into its
//! column block of a shared `[rows x 2nd]` buffer; the encoder-output
//! gradient is formed once, after the last contribution (layer 0) arrives.

use crate::error::{Error, Result};
use crate::gradients::elementwise::bias_grad_into;
use crate::kernels::gemm::{gemm_into, GemmDims};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PackedCrossWeights<T> {
    pub layers: usize,
    pub d: usize,
    /// `[2nd x d]`.
    pub w: Vec<T>,
    /// `[2nd]`.
    pub b: Vec<T>,
}

impl<T: Real> PackedCrossWeights<T> {
    /// Row range of layer `i`'s key (`value = false`) or value projection.
    pub fn rows_of(&self, layer: usize, value: bool) -> std::ops::Range<usize> {
        let base = if value { self.layers + layer } else { layer } * self.d;
        base..base + self.d
    }

    /// Per-layer `(keys, values, key biases, value biases)`.
    #[allow(clippy::type_complexity)]
    pub fn unpack(&self) -> (Vec<Tensor<T>>, Vec<Tensor<T>>, Vec<Vec<T>>, Vec<Vec<T>>) {
        let d = self.d;
        let mat = |r: std::ops::Range<usize>| {
            Tensor::new(&[d, d], self.w[r.start * d..r.end * d].to_vec()).unwrap()
        };
        let (mut ks, mut vs, mut kb, mut vb) = (vec![], vec![], vec![], vec![]);
        for i in 0..self.layers {
            ks.push(mat(self.rows_of(i, false)));
            vs.push(mat(self.rows_of(i, true)));
            kb.push(self.b[self.rows_of(i, false)].to_vec());
            vb.push(self.b[self.rows_of(i, true)].to_vec());
        }
        (ks, vs, kb, vb)
    }
}

/// Stacks per-layer `[d x d]` key and value projections and their biases.
pub fn pack_cross_weights<T: Real>(
    keys: &[Tensor<T>],
    values: &[Tensor<T>],
    key_bias: &[Vec<T>],
    value_bias: &[Vec<T>],
) -> Result<PackedCrossWeights<T>> {
    let n = keys.len();
    if n == 0 || values.len() != n || key_bias.len() != n || value_bias.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} key / {} value projections",
            values.len()
        )));
    }
    let d = keys[0].rows();
    let square = |t: &Tensor<T>| t.shape() == [d, d];
    if !keys.iter().chain(values).all(square)
        || !key_bias.iter().chain(value_bias).all(|b| b.len() == d)
    {
        return Err(Error::ShapeMismatch(format!(
            "cross projections must all be [{d} x {d}]"
        )));
    }
    let mut w = Vec::with_capacity(2 * n * d * d);
    let mut b = Vec::with_capacity(2 * n * d);
    for t in keys.iter().chain(values) {
        w.extend_from_slice(t.data());
    }
    for v in key_bias.iter().chain(value_bias) {
        b.extend_from_slice(v);
    }
    Ok(PackedCrossWeights { layers: n, d, w, b })
}

/// `out = x · W_packedᵀ` for `x` of `rows x d`; `out` is `rows x 2nd`.
/// Biases are added by the caller while splitting.
pub fn packed_kv_project_into<T: Real>(x: &[T], d: usize, w: &[T], out: &mut [T]) {
    let rows = x.len() / d;
    let wide = w.len() / d;
    gemm_into(
        GemmDims {
            m: rows,
            n: wide,
            k: d,
        },
        x,
        false,
        w,
        true,
        out,
        false,
    );
}

/// Backward of the packed projection from the assembled `d_kv`
/// (`rows x 2nd`): `dx = d_kv · W`, `dW = d_kvᵀ · x`, `db = Σ_rows d_kv`.
pub fn packed_kv_backward_into<T: Real>(
    d_kv: &[T],
    x: &[T],
    d: usize,
    w: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let rows = x.len() / d;
    let wide = w.len() / d;
    gemm_into(
        GemmDims {
            m: rows,
            n: d,
            k: wide,
        },
        d_kv,
        false,
        w,
        false,
        dx,
        false,
    );
    gemm_into(
        GemmDims {
            m: wide,
            n: d,
            k: rows,
        },
        d_kv,
        true,
        x,
        false,
        dw,
        false,
    );
    bias_grad_into(d_kv, wide, db);
}

/// Tracks which decoder layers have deposited their key/value gradients.
#[derive(Clone, Debug)]
pub struct CrossGradState {
    filled: Vec<bool>,
}

impl CrossGradState {
    pub fn new(layers: usize) -> Self {
        Self {
            filled: vec![false; layers],
        }
    }

    pub fn mark(&mut self, layer: usize) {
        self.filled[layer] = true;
    }

    /// Fails with the first missing layer.
    pub fn check_complete(&self) -> Result<()> {
        match self.filled.iter().position(|&f| !f) {
            Some(layer) => Err(Error::IncompleteGradientSet { layer }),
            None => Ok(()),
        }
    }
}

fn check_x<T: Real>(x: &Tensor<T>, d: usize) -> Result<()> {
    if x.rank() != 3 || x.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "encoder output {:?} for d = {d}",
            x.shape()
        )));
    }
    Ok(())
}

/// One GEMM against the packed weights, then a `2n`-way split. Returns
/// `(K_i, V_i)` per layer, each shaped like `x`.
pub fn packed_kv_forward<T: Real>(
    x: &Tensor<T>,
    pw: &PackedCrossWeights<T>,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let d = pw.d;
    check_x(x, d)?;
    let rows = x.rows();
    let wide = 2 * pw.layers * d;
    let mut kv = vec![T::zero(); rows * wide];
    packed_kv_project_into(x.data(), d, &pw.w, &mut kv);
    let slice = |r: std::ops::Range<usize>| {
        let data = (0..rows)
            .flat_map(|row| (r.clone()).map(move |c| (row, c)))
            .map(|(row, c)| kv[row * wide + c] + pw.b[c])
            .collect();
        Tensor::new(x.shape(), data)
    };
    (0..pw.layers)
        .map(|i| Ok((slice(pw.rows_of(i, false))?, slice(pw.rows_of(i, true))?)))
        .collect()
}

/// Encoder-output gradient and packed weight gradients from per-layer
/// `(dK_i, dV_i)`. Every layer must be present.
#[allow(clippy::type_complexity)]
pub fn packed_kv_backward<T: Real>(
    grads: &[Option<(Tensor<T>, Tensor<T>)>],
    x: &Tensor<T>,
    pw: &PackedCrossWeights<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = pw.d;
    check_x(x, d)?;
    if grads.len() != pw.layers {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient pairs for {} layers",
            grads.len(),
            pw.layers
        )));
    }
    let rows = x.rows();
    let wide = 2 * pw.layers * d;
    let mut d_kv = vec![T::zero(); rows * wide];
    let mut state = CrossGradState::new(pw.layers);
    for (i, g) in grads.iter().enumerate() {
        let Some((dk, dv)) = g else { continue };
        if dk.shape() != x.shape() || dv.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!("layer {i} gradient shapes")));
        }
        for (t, value) in [(dk, false), (dv, true)] {
            let cols = pw.rows_of(i, value);
            for row in 0..rows {
                d_kv[row * wide + cols.start..row * wide + cols.end]
                    .copy_from_slice(&t.data()[row * d..(row + 1) * d]);
            }
        }
        state.mark(i);
    }
    state.check_complete()?;
    let mut dx = Tensor::zeros(x.shape())?;
    let mut dw = vec![T::zero(); wide * d];
    let mut db = vec![T::zero(); wide];
    packed_kv_backward_into(&d_kv, x.data(), d, &pw.w, dx.data_mut(), &mut dw, &mut db);
    Ok((dx, dw, db))
}
