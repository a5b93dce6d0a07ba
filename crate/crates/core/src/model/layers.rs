//! Encoder and decoder layers assembled from the pre-LN sublayers.

use crate::error::Result;
use crate::kernels::softmax::AttentionMask;
use crate::memplan::{Arena, ArenaBuf};
use crate::numerics::Real;

use super::blocks::{
    cross_attn_backward, cross_attn_forward, ffn_backward, ffn_forward, self_attn_backward,
    self_attn_forward, CrossAttnIds, CrossAttnStash, CrossKv, Ctx, Dims, FfnIds, FfnStash, LnIds,
    SelfAttnIds, SelfAttnStash, Seq,
};
use super::params::{GradSink, ParamSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub ln1: LnIds,
    pub attn: SelfAttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub ln1: LnIds,
    pub self_attn: SelfAttnIds,
    pub ln2: LnIds,
    pub cross: CrossAttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

/// Drop probability and one seed per dropout site of a layer: attention
/// output(s) first, then the FFN activation and output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDropout {
    pub p: f64,
    pub seeds: [u64; 4],
}

pub struct EncoderStash<T> {
    attn: SelfAttnStash<T>,
    ffn: FfnStash<T>,
}

pub struct DecoderStash<T> {
    self_attn: SelfAttnStash<T>,
    cross: CrossAttnStash<T>,
    ffn: FfnStash<T>,
}

impl<T: Real> EncoderStash<T> {
    pub fn release(self, arena: &mut Arena<T>) {
        self.attn.release(arena);
        self.ffn.release(arena);
    }
}

impl<T: Real> DecoderStash<T> {
    pub fn release(self, arena: &mut Arena<T>) {
        self.self_attn.release(arena);
        self.cross.release(arena);
        self.ffn.release(arena);
    }
}

/// Self-attention (masked by `mask`) then FFN. Consumes `x`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ids: &EncoderLayerIds,
    x: ArenaBuf<T>,
    seq: Seq,
    mask: &AttentionMask,
    drop: &LayerDropout,
    dims: Dims,
) -> Result<(ArenaBuf<T>, EncoderStash<T>)> {
    let (x1, attn) = self_attn_forward(
        cx,
        ids.ln1,
        ids.attn,
        x,
        seq,
        mask,
        (drop.p, drop.seeds[0]),
        dims,
    )?;
    let (y, ffn) = ffn_forward(
        cx,
        ids.ln2,
        ids.ffn,
        x1,
        (drop.p, drop.seeds[1], drop.seeds[2]),
        dims,
    )?;
    Ok((y, EncoderStash { attn, ffn }))
}

pub fn encoder_layer_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ids: &EncoderLayerIds,
    dy: ArenaBuf<T>,
    st: EncoderStash<T>,
    dims: Dims,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let d1 = ffn_backward(cx, ids.ln2, ids.ffn, dy, st.ffn, dims, sink)?;
    self_attn_backward(cx, ids.ln1, ids.attn, d1, st.attn, dims, sink)
}

/// Causal self-attention, cross-attention over precomputed `kv`, then FFN.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_forward<T: Real, P: ParamSource<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ids: &DecoderLayerIds,
    x: ArenaBuf<T>,
    seq: Seq,
    self_mask: &AttentionMask,
    kv: &CrossKv<'_, T>,
    src_mask: &AttentionMask,
    drop: &LayerDropout,
    dims: Dims,
) -> Result<(ArenaBuf<T>, DecoderStash<T>)> {
    let (x1, self_attn) = self_attn_forward(
        cx,
        ids.ln1,
        ids.self_attn,
        x,
        seq,
        self_mask,
        (drop.p, drop.seeds[0]),
        dims,
    )?;
    let (x2, cross) = cross_attn_forward(
        cx,
        ids.ln2,
        ids.cross,
        x1,
        seq,
        kv,
        src_mask,
        (drop.p, drop.seeds[1]),
        dims,
    )?;
    let (y, ffn) = ffn_forward(
        cx,
        ids.ln3,
        ids.ffn,
        x2,
        (drop.p, drop.seeds[2], drop.seeds[3]),
        dims,
    )?;
    Ok((
        y,
        DecoderStash {
            self_attn,
            cross,
            ffn,
        },
    ))
}

/// Writes this layer's key/value gradients into `d_kv` at `cols` and
/// returns the gradient of the layer input.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
    cx: &mut Ctx<'_, T, P>,
    ids: &DecoderLayerIds,
    dy: ArenaBuf<T>,
    st: DecoderStash<T>,
    kv: &CrossKv<'_, T>,
    d_kv: &mut [T],
    kv_width: usize,
    cols: (usize, usize),
    dims: Dims,
    sink: &mut G,
) -> Result<ArenaBuf<T>> {
    let d2 = ffn_backward(cx, ids.ln3, ids.ffn, dy, st.ffn, dims, sink)?;
    let d1 = cross_attn_backward(
        cx, ids.ln2, ids.cross, d2, st.cross, kv, d_kv, kv_width, cols, dims, sink,
    )?;
    self_attn_backward(cx, ids.ln1, ids.self_attn, d1, st.self_attn, dims, sink)
}
