//! Pre-LayerNorm sublayers with hand-wired backward passes.
//!
//! Every float buffer comes from the arena and goes back to it as soon as
//! it is dead, so the request sequence is identical for every batch and can
//! be planned. Weights are read from the parameter source into arena
//! buffers when needed and released right after use.

use crate::error::{Error, Result};
use crate::gradients::elementwise::{
    bias_dropout_residual_backward_into, bias_grad_into, bias_relu_dropout_backward_into,
};
use crate::gradients::layernorm::{layernorm_backward_dx_into, layernorm_param_grads_into};
use crate::gradients::softmax::softmax_backward_in_place;
use crate::kernels::dropout::{BitMask, DropoutMask};
use crate::kernels::elementwise::{
    bias_dropout_residual_into, bias_relu_dropout_into, merge_heads, split_heads, split_heads_bias,
    Heads,
};
use crate::kernels::gemm::{batched_gemm_into, gemm_into, gemm_into_serial, GemmDims};
use crate::kernels::layernorm::layernorm_forward_into;
use crate::kernels::softmax::{
    select_softmax_strategy, softmax_rows_into, AttentionMask, RowLayout,
};
use crate::memplan::{Arena, ArenaBuf};
use crate::numerics::Real;
use crate::par;

use super::params::{GradSink, ParamId, ParamLayout, ParamSource};

/// Parameter source, its layout and the arena, bundled for the sublayers.
pub struct Ctx<'a, T, P: ?Sized> {
    pub layout: &'a ParamLayout,
    pub params: &'a P,
    pub arena: &'a mut Arena<T>,
}

impl<T: Real, P: ParamSource<T> + ?Sized> Ctx<'_, T, P> {
    pub fn load(&mut self, id: ParamId) -> Result<ArenaBuf<T>> {
        let mut b = self.arena.take(self.layout.len(id))?;
        self.params.read_into(id, &mut b);
        Ok(b)
    }

    pub fn take(&mut self, len: usize) -> Result<ArenaBuf<T>> {
        self.arena.take(len)
    }

    pub fn give(&mut self, b: ArenaBuf<T>) {
        self.arena.give(b)
    }
}

/// Batch geometry of one sequence stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seq {
    pub batch: usize,
    pub len: usize,
}

impl Seq {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn heads(&self, heads: usize, head_dim: usize) -> Heads {
        Heads {
            batch: self.batch,
            len: self.len,
            heads,
            head_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LnIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfAttnIds {
    /// `[3d x d]`, rows ordered query, key, value.
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttnIds {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Hyperparameters shared by every sublayer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dims {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub eps: f64,
}

impl Dims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

fn gemm<T: Real>(m: usize, n: usize, k: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
    gemm_into(GemmDims { m, n, k }, a, ta, b, tb, c, false)
}

// ---------------------------------------------------------------- LayerNorm

pub struct LnStash<T> {
    pub mu: ArenaBuf<T>,
    pub sigma: ArenaBuf<T>,
}

impl<T: Real> LnStash<T> {
    pub fn release(self, arena: &mut Arena<T>) {
        arena.give(self.mu);
        arena.give(self.sigma);
    }
}

pub fn ln_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ids: LnIds,
    x: &[T],
    dims: Dims,
) -> Result<(ArenaBuf<T>, LnStash<T>)> {
    let rows = x.len() / dims.d;
    let (w, b) = (cx.load(ids.w)?, cx.load(ids.b)?);
    let mut y = cx.take(x.len())?;
    let mut mu = cx.take(rows)?;
    let mut sigma = cx.take(rows)?;
    let r = layernorm_forward_into(x, dims.d, &w, &b, dims.eps, &mut y, &mut mu, &mut sigma);
    cx.give(w);
    cx.give(b);
    if let Err(e) = r {
        cx.give(y);
        cx.give(mu);
        cx.give(sigma);
        return Err(e);
    }
    Ok((y, LnStash { mu, sigma }))
}

/// Returns `dx`; parameter gradients go to `sink`.
pub fn ln_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ids: LnIds,
    dy: &[T],
    x: &[T],
    st: LnStash<T>,
    dims: Dims,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let d = dims.d;
    let w = cx.load(ids.w)?;
    let mut dx = cx.take(x.len())?;
    layernorm_backward_dx_into(dy, x, d, &w, &st.mu, &st.sigma, &mut dx);
    cx.give(w);
    let mut dw = cx.take(d)?;
    let mut db = cx.take(d)?;
    layernorm_param_grads_into(dy, x, d, &st.mu, &st.sigma, &mut dw, &mut db);
    sink.accumulate(ids.w, &dw);
    sink.accumulate(ids.b, &db);
    cx.give(dw);
    cx.give(db);
    st.release(cx.arena);
    Ok(dx)
}

// ---------------------------------------------------------- attention core

fn scale_in_place<T: Real>(x: &mut [T], s: T) {
    par::for_each_row(x, 4096, |_, c| c.iter_mut().for_each(|v| *v *= s));
}

/// `scores[bh] = scale * q[bh] · k[bh]ᵀ`, the scale applied as the GEMM's
/// epilogue.
fn scores_into<T: Real>(
    q: &[T],
    k: &[T],
    lq: usize,
    lk: usize,
    dh: usize,
    scale: T,
    out: &mut [T],
) {
    par::for_each_row(out, lq * lk, |i, block| {
        let qi = &q[i * lq * dh..(i + 1) * lq * dh];
        let ki = &k[i * lk * dh..(i + 1) * lk * dh];
        gemm_into_serial(
            GemmDims {
                m: lq,
                n: lk,
                k: dh,
            },
            qi,
            false,
            ki,
            true,
            block,
            false,
        );
        block.iter_mut().for_each(|v| *v *= scale);
    });
}

/// Scores, masked softmax and context. Returns `(probs, ctx)`, both
/// head-major.
fn attn_core_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    q: &[T],
    k: &[T],
    v: &[T],
    gq: Heads,
    lk: usize,
    mask: &AttentionMask,
) -> Result<(ArenaBuf<T>, ArenaBuf<T>)> {
    let (b, n, lq, dh) = (gq.batch, gq.heads, gq.len, gq.head_dim);
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut scores = cx.take(b * n * lq * lk)?;
    scores_into(q, k, lq, lk, dh, scale, &mut scores);
    let layout = RowLayout {
        batch: b,
        rows_per_batch: n * lq,
        queries: lq,
        cols: lk,
    };
    let mut probs = cx.take(scores.len())?;
    let r = softmax_rows_into(
        &scores,
        layout,
        mask,
        select_softmax_strategy(layout.rows(), lk, false),
        &mut probs,
    );
    cx.give(scores);
    if let Err(e) = r {
        cx.give(probs);
        return Err(e);
    }
    let mut ctx = cx.take(b * n * lq * dh)?;
    batched_gemm_into(
        b * n,
        GemmDims {
            m: lq,
            n: dh,
            k: lk,
        },
        &probs,
        false,
        v,
        false,
        &mut ctx,
        false,
    );
    Ok((probs, ctx))
}

/// Returns `(dq, dk, dv)` head-major. Consumes `d_ctx` and `probs`.
#[allow(clippy::too_many_arguments)]
fn attn_core_backward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    d_ctx: ArenaBuf<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: ArenaBuf<T>,
    gq: Heads,
    lk: usize,
) -> Result<(ArenaBuf<T>, ArenaBuf<T>, ArenaBuf<T>)> {
    let (b, n, lq, dh) = (gq.batch, gq.heads, gq.len, gq.head_dim);
    let count = b * n;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut d_probs = cx.take(probs.len())?;
    batched_gemm_into(
        count,
        GemmDims {
            m: lq,
            n: lk,
            k: dh,
        },
        &d_ctx,
        false,
        v,
        true,
        &mut d_probs,
        false,
    );
    let mut dv = cx.take(count * lk * dh)?;
    batched_gemm_into(
        count,
        GemmDims {
            m: lk,
            n: dh,
            k: lq,
        },
        &probs,
        true,
        &d_ctx,
        false,
        &mut dv,
        false,
    );
    cx.give(d_ctx);
    softmax_backward_in_place(&mut d_probs, &probs, lk);
    cx.give(probs);
    scale_in_place(&mut d_probs, scale);
    let mut dq = cx.take(count * lq * dh)?;
    batched_gemm_into(
        count,
        GemmDims {
            m: lq,
            n: dh,
            k: lk,
        },
        &d_probs,
        false,
        k,
        false,
        &mut dq,
        false,
    );
    let mut dk = cx.take(count * lk * dh)?;
    batched_gemm_into(
        count,
        GemmDims {
            m: lk,
            n: dh,
            k: lq,
        },
        &d_probs,
        true,
        q,
        false,
        &mut dk,
        false,
    );
    cx.give(d_probs);
    Ok((dq, dk, dv))
}

/// Output projection then the fused bias + dropout + residual tail.
fn out_proj_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    w_id: ParamId,
    b_id: ParamId,
    ctx: &[T],
    residual: &[T],
    mask: &DropoutMask,
    d: usize,
) -> Result<ArenaBuf<T>> {
    let rows = ctx.len() / d;
    let w = cx.load(w_id)?;
    let mut o = cx.take(rows * d)?;
    gemm(rows, d, d, ctx, false, &w, true, &mut o);
    cx.give(w);
    let bias = cx.load(b_id)?;
    let mut y = cx.take(rows * d)?;
    bias_dropout_residual_into(&o, &bias, residual, mask, &mut y);
    cx.give(o);
    cx.give(bias);
    Ok(y)
}

/// Backward of [`out_proj_forward`]: returns `d_ctx` (merged layout).
#[allow(clippy::too_many_arguments)]
fn out_proj_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    w_id: ParamId,
    b_id: ParamId,
    dy: &[T],
    ctx: &[T],
    mask: &DropoutMask,
    d: usize,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let rows = dy.len() / d;
    let mut d_o = cx.take(rows * d)?;
    let mut db = cx.take(d)?;
    bias_dropout_residual_backward_into(dy, mask, d, &mut d_o, &mut db);
    sink.accumulate(b_id, &db);
    cx.give(db);
    let mut dw = cx.take(d * d)?;
    gemm(d, d, rows, &d_o, true, ctx, false, &mut dw);
    sink.accumulate(w_id, &dw);
    cx.give(dw);
    let w = cx.load(w_id)?;
    let mut d_ctx = cx.take(rows * d)?;
    gemm(rows, d, d, &d_o, false, &w, false, &mut d_ctx);
    cx.give(w);
    cx.give(d_o);
    Ok(d_ctx)
}

// ---------------------------------------------------------- self-attention

pub struct SelfAttnStash<T> {
    pub x: ArenaBuf<T>,
    ln: LnStash<T>,
    u: ArenaBuf<T>,
    q: ArenaBuf<T>,
    k: ArenaBuf<T>,
    v: ArenaBuf<T>,
    probs: ArenaBuf<T>,
    ctx: ArenaBuf<T>,
    mask: DropoutMask,
    seq: Seq,
}

/// `y = x + Drop(OutProj(Attn(LN(x))))`. Takes ownership of `x`, which the
/// stash keeps for the LayerNorm backward.
#[allow(clippy::too_many_arguments)]
pub fn self_attn_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ln_ids: LnIds,
    ids: SelfAttnIds,
    x: ArenaBuf<T>,
    seq: Seq,
    attn_mask: &AttentionMask,
    drop: (f64, u64),
    dims: Dims,
) -> Result<(ArenaBuf<T>, SelfAttnStash<T>)> {
    let (d, rows) = (dims.d, seq.rows());
    let g = seq.heads(dims.heads, dims.head_dim());
    let (u, ln) = ln_forward(cx, ln_ids, &x, dims)?;
    let w = cx.load(ids.qkv_w)?;
    let mut qkv = cx.take(rows * 3 * d)?;
    gemm(rows, 3 * d, d, &u, false, &w, true, &mut qkv);
    cx.give(w);
    let bias = cx.load(ids.qkv_b)?;
    let mut heads = Vec::with_capacity(3);
    for part in 0..3 {
        let mut h = cx.take(rows * d)?;
        split_heads_bias(
            &qkv,
            3 * d,
            part * d,
            &bias[part * d..(part + 1) * d],
            g,
            &mut h,
        );
        heads.push(h);
    }
    cx.give(bias);
    cx.give(qkv);
    let v = heads.pop().unwrap();
    let k = heads.pop().unwrap();
    let q = heads.pop().unwrap();
    let (probs, ctx_h) = attn_core_forward(cx, &q, &k, &v, g, seq.len, attn_mask)?;
    let mut ctx = cx.take(rows * d)?;
    merge_heads(&ctx_h, g, &mut ctx, d, 0);
    cx.give(ctx_h);
    let mask = DropoutMask::generate(drop.1, drop.0, rows * d)?;
    let y = out_proj_forward(cx, ids.out_w, ids.out_b, &ctx, &x, &mask, d)?;
    Ok((
        y,
        SelfAttnStash {
            x,
            ln,
            u,
            q,
            k,
            v,
            probs,
            ctx,
            mask,
            seq,
        },
    ))
}

/// Consumes `dy` and the stash; returns `dx`.
pub fn self_attn_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ln_ids: LnIds,
    ids: SelfAttnIds,
    mut dy: ArenaBuf<T>,
    st: SelfAttnStash<T>,
    dims: Dims,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let SelfAttnStash {
        x,
        ln,
        u,
        q,
        k,
        v,
        probs,
        ctx,
        mask,
        seq,
    } = st;
    let (d, rows) = (dims.d, seq.rows());
    let g = seq.heads(dims.heads, dims.head_dim());
    let d_ctx_m = out_proj_backward(cx, ids.out_w, ids.out_b, &dy, &ctx, &mask, d, sink)?;
    cx.give(ctx);
    let mut d_ctx = cx.take(rows * d)?;
    split_heads(&d_ctx_m, d, 0, g, &mut d_ctx);
    cx.give(d_ctx_m);
    let (dq, dk, dv) = attn_core_backward(cx, d_ctx, &q, &k, &v, probs, g, seq.len)?;
    cx.give(q);
    cx.give(k);
    cx.give(v);
    let mut d_qkv = cx.take(rows * 3 * d)?;
    for (part, h) in [dq, dk, dv].into_iter().enumerate() {
        merge_heads(&h, g, &mut d_qkv, 3 * d, part * d);
        cx.give(h);
    }
    let mut db = cx.take(3 * d)?;
    bias_grad_into(&d_qkv, 3 * d, &mut db);
    sink.accumulate(ids.qkv_b, &db);
    cx.give(db);
    let mut dw = cx.take(3 * d * d)?;
    gemm(3 * d, d, rows, &d_qkv, true, &u, false, &mut dw);
    sink.accumulate(ids.qkv_w, &dw);
    cx.give(dw);
    cx.give(u);
    let w = cx.load(ids.qkv_w)?;
    let mut du = cx.take(rows * d)?;
    gemm(rows, d, 3 * d, &d_qkv, false, &w, false, &mut du);
    cx.give(w);
    cx.give(d_qkv);
    let dx_ln = ln_backward(cx, ln_ids, &du, &x, ln, dims, sink)?;
    cx.give(du);
    cx.give(x);
    add_in_place(&mut dy, &dx_ln);
    cx.give(dx_ln);
    Ok(dy)
}

fn add_in_place<T: Real>(acc: &mut [T], x: &[T]) {
    par::for_each_row(acc, 4096, |c, chunk| {
        let base = c * 4096;
        for (k, a) in chunk.iter_mut().enumerate() {
            *a += x[base + k];
        }
    });
}

// --------------------------------------------------------- cross-attention

/// Precomputed keys and values for one decoder layer, head-major over the
/// source sequence.
pub struct CrossKv<'a, T> {
    pub k: &'a [T],
    pub v: &'a [T],
    pub src: Seq,
}

pub struct CrossAttnStash<T> {
    pub x: ArenaBuf<T>,
    ln: LnStash<T>,
    u: ArenaBuf<T>,
    q: ArenaBuf<T>,
    probs: ArenaBuf<T>,
    ctx: ArenaBuf<T>,
    mask: DropoutMask,
    seq: Seq,
}

#[allow(clippy::too_many_arguments)]
pub fn cross_attn_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ln_ids: LnIds,
    ids: CrossAttnIds,
    x: ArenaBuf<T>,
    seq: Seq,
    kv: &CrossKv<'_, T>,
    src_mask: &AttentionMask,
    drop: (f64, u64),
    dims: Dims,
) -> Result<(ArenaBuf<T>, CrossAttnStash<T>)> {
    let (d, rows) = (dims.d, seq.rows());
    if kv.src.batch != seq.batch {
        return Err(Error::ShapeMismatch(format!(
            "source batch {} vs target batch {}",
            kv.src.batch, seq.batch
        )));
    }
    let g = seq.heads(dims.heads, dims.head_dim());
    let (u, ln) = ln_forward(cx, ln_ids, &x, dims)?;
    let w = cx.load(ids.q_w)?;
    let mut ql = cx.take(rows * d)?;
    gemm(rows, d, d, &u, false, &w, true, &mut ql);
    cx.give(w);
    let bias = cx.load(ids.q_b)?;
    let mut q = cx.take(rows * d)?;
    split_heads_bias(&ql, d, 0, &bias, g, &mut q);
    cx.give(bias);
    cx.give(ql);
    let (probs, ctx_h) = attn_core_forward(cx, &q, kv.k, kv.v, g, kv.src.len, src_mask)?;
    let mut ctx = cx.take(rows * d)?;
    merge_heads(&ctx_h, g, &mut ctx, d, 0);
    cx.give(ctx_h);
    let mask = DropoutMask::generate(drop.1, drop.0, rows * d)?;
    let y = out_proj_forward(cx, ids.out_w, ids.out_b, &ctx, &x, &mask, d)?;
    Ok((
        y,
        CrossAttnStash {
            x,
            ln,
            u,
            q,
            probs,
            ctx,
            mask,
            seq,
        },
    ))
}

/// Returns `dx`. The key and value gradients are written into their column
/// blocks (`k_col`, `v_col`) of `d_kv`, a `[src rows x kv_width]` buffer.
#[allow(clippy::too_many_arguments)]
pub fn cross_attn_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ln_ids: LnIds,
    ids: CrossAttnIds,
    mut dy: ArenaBuf<T>,
    st: CrossAttnStash<T>,
    kv: &CrossKv<'_, T>,
    d_kv: &mut [T],
    kv_width: usize,
    cols: (usize, usize),
    dims: Dims,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let CrossAttnStash {
        x,
        ln,
        u,
        q,
        probs,
        ctx,
        mask,
        seq,
    } = st;
    let (d, rows) = (dims.d, seq.rows());
    let g = seq.heads(dims.heads, dims.head_dim());
    let gs = kv.src.heads(dims.heads, dims.head_dim());
    let d_ctx_m = out_proj_backward(cx, ids.out_w, ids.out_b, &dy, &ctx, &mask, d, sink)?;
    cx.give(ctx);
    let mut d_ctx = cx.take(rows * d)?;
    split_heads(&d_ctx_m, d, 0, g, &mut d_ctx);
    cx.give(d_ctx_m);
    let (dq, dk, dv) = attn_core_backward(cx, d_ctx, &q, kv.k, kv.v, probs, g, kv.src.len)?;
    cx.give(q);
    merge_heads(&dk, gs, d_kv, kv_width, cols.0);
    merge_heads(&dv, gs, d_kv, kv_width, cols.1);
    cx.give(dk);
    cx.give(dv);
    let mut dql = cx.take(rows * d)?;
    merge_heads(&dq, g, &mut dql, d, 0);
    cx.give(dq);
    let mut db = cx.take(d)?;
    bias_grad_into(&dql, d, &mut db);
    sink.accumulate(ids.q_b, &db);
    cx.give(db);
    let mut dw = cx.take(d * d)?;
    gemm(d, d, rows, &dql, true, &u, false, &mut dw);
    sink.accumulate(ids.q_w, &dw);
    cx.give(dw);
    cx.give(u);
    let w = cx.load(ids.q_w)?;
    let mut du = cx.take(rows * d)?;
    gemm(rows, d, d, &dql, false, &w, false, &mut du);
    cx.give(w);
    cx.give(dql);
    let dx_ln = ln_backward(cx, ln_ids, &du, &x, ln, dims, sink)?;
    cx.give(du);
    cx.give(x);
    add_in_place(&mut dy, &dx_ln);
    cx.give(dx_ln);
    Ok(dy)
}

// --------------------------------------------------------------------- FFN

pub struct FfnStash<T> {
    pub x: ArenaBuf<T>,
    ln: LnStash<T>,
    u: ArenaBuf<T>,
    act: ArenaBuf<T>,
    relu: BitMask,
    mask_act: DropoutMask,
    mask_out: DropoutMask,
}

/// `y = x + Drop(W2 · ReLUDrop(W1 · LN(x) + b1) + b2)`.
pub fn ffn_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ln_ids: LnIds,
    ids: FfnIds,
    x: ArenaBuf<T>,
    drop: (f64, u64, u64),
    dims: Dims,
) -> Result<(ArenaBuf<T>, FfnStash<T>)> {
    let (d, f) = (dims.d, dims.d_ff);
    let rows = x.len() / d;
    let (u, ln) = ln_forward(cx, ln_ids, &x, dims)?;
    let w1 = cx.load(ids.w1)?;
    let mut h = cx.take(rows * f)?;
    gemm(rows, f, d, &u, false, &w1, true, &mut h);
    cx.give(w1);
    let b1 = cx.load(ids.b1)?;
    let mut act = cx.take(rows * f)?;
    let mut relu = BitMask::zeros(rows * f);
    let mask_act = DropoutMask::generate(drop.1, drop.0, rows * f)?;
    bias_relu_dropout_into(&h, &b1, &mask_act, &mut act, &mut relu);
    cx.give(b1);
    cx.give(h);
    let w2 = cx.load(ids.w2)?;
    let mut o = cx.take(rows * d)?;
    gemm(rows, d, f, &act, false, &w2, true, &mut o);
    cx.give(w2);
    let b2 = cx.load(ids.b2)?;
    let mask_out = DropoutMask::generate(drop.2, drop.0, rows * d)?;
    let mut y = cx.take(rows * d)?;
    bias_dropout_residual_into(&o, &b2, &x, &mask_out, &mut y);
    cx.give(b2);
    cx.give(o);
    Ok((
        y,
        FfnStash {
            x,
            ln,
            u,
            act,
            relu,
            mask_act,
            mask_out,
        },
    ))
}

pub fn ffn_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ln_ids: LnIds,
    ids: FfnIds,
    mut dy: ArenaBuf<T>,
    st: FfnStash<T>,
    dims: Dims,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let FfnStash {
        x,
        ln,
        u,
        act,
        relu,
        mask_act,
        mask_out,
    } = st;
    let (d, f) = (dims.d, dims.d_ff);
    let rows = x.len() / d;
    let mut d_o = cx.take(rows * d)?;
    let mut db2 = cx.take(d)?;
    bias_dropout_residual_backward_into(&dy, &mask_out, d, &mut d_o, &mut db2);
    sink.accumulate(ids.b2, &db2);
    cx.give(db2);
    let mut dw2 = cx.take(d * f)?;
    gemm(d, f, rows, &d_o, true, &act, false, &mut dw2);
    sink.accumulate(ids.w2, &dw2);
    cx.give(dw2);
    cx.give(act);
    let w2 = cx.load(ids.w2)?;
    let mut d_act = cx.take(rows * f)?;
    gemm(rows, f, d, &d_o, false, &w2, false, &mut d_act);
    cx.give(w2);
    cx.give(d_o);
    let mut dh = cx.take(rows * f)?;
    let mut db1 = cx.take(f)?;
    bias_relu_dropout_backward_into(&d_act, &mask_act, &relu, f, &mut dh, &mut db1);
    sink.accumulate(ids.b1, &db1);
    cx.give(db1);
    cx.give(d_act);
    let mut dw1 = cx.take(f * d)?;
    gemm(f, d, rows, &dh, true, &u, false, &mut dw1);
    sink.accumulate(ids.w1, &dw1);
    cx.give(dw1);
    cx.give(u);
    let w1 = cx.load(ids.w1)?;
    let mut du = cx.take(rows * d)?;
    gemm(rows, d, f, &dh, false, &w1, false, &mut du);
    cx.give(w1);
    cx.give(dh);
    let dx_ln = ln_backward(cx, ln_ids, &du, &x, ln, dims, sink)?;
    cx.give(du);
    cx.give(x);
    add_in_place(&mut dy, &dx_ln);
    cx.give(dx_ln);
    Ok(dy)
}

impl<T: Real> SelfAttnStash<T> {
    pub fn release(self, arena: &mut Arena<T>) {
        self.ln.release(arena);
        for b in [self.x, self.u, self.q, self.k, self.v, self.probs, self.ctx] {
            arena.give(b);
        }
    }
}

impl<T: Real> CrossAttnStash<T> {
    pub fn release(self, arena: &mut Arena<T>) {
        self.ln.release(arena);
        for b in [self.x, self.u, self.q, self.probs, self.ctx] {
            arena.give(b);
        }
    }
}

impl<T: Real> FfnStash<T> {
    pub fn release(self, arena: &mut Arena<T>) {
        self.ln.release(arena);
        for b in [self.x, self.u, self.act] {
            arena.give(b);
        }
    }
}
