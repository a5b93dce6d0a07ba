//! The full encoder-decoder: embeddings, layer stacks, packed cross
//! projections, tied output projection and the fused criterion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::embedding::embedding_backward_into;
use crate::kernels::criterion::fused_criterion_in_place;
use crate::kernels::dropout::DropoutMask;
use crate::kernels::elementwise::split_heads_bias;
use crate::kernels::embedding::embedding_forward_into;
use crate::kernels::gemm::{gemm_into, GemmDims};
use crate::kernels::softmax::AttentionMask;
use crate::memplan::{estimate_capacity_over, Arena, ArenaBuf, Capacity, Corner, DatasetStats};
use crate::numerics::rng::dropout_seed;
use crate::numerics::{CounterRng, Real};

use super::blocks::{
    ln_backward, ln_forward, CrossAttnIds, CrossKv, Ctx, Dims, FfnIds, LnIds, LnStash, SelfAttnIds,
    Seq,
};
use super::config::{sinusoidal_positions, ModelConfig};
use super::cross::{packed_kv_backward_into, packed_kv_project_into, CrossGradState};
use super::layers::{
    decoder_layer_backward, decoder_layer_forward, encoder_layer_backward, encoder_layer_forward,
    DecoderLayerIds, DecoderStash, EncoderLayerIds, EncoderStash, LayerDropout,
};
use super::params::{FlatParams, GradSink, NullSink, ParamId, ParamLayout, ParamSource};

/// A padded batch of source/target pairs.
///
/// `src` is `batch x src_len`; `tgt_in` (decoder input, BOS-shifted) and
/// `tgt_out` (prediction targets) are `batch x tgt_len`. Padding sits at the
/// end of each row; `tgt_out` holds the pad id there.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    /// Pads `(source, target)` pairs; the decoder reads `[bos, t_0, .., t_{n-2}]`
    /// and predicts `[t_0, .., t_{n-1}]`.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)], pad: usize, bos: usize) -> Result<Self> {
        if pairs.is_empty() || pairs.iter().any(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::InvalidConfig(
                "batch needs non-empty sources and targets".into(),
            ));
        }
        let batch = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
        let tgt_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap();
        let mut b = Batch {
            batch,
            src_len,
            tgt_len,
            src: vec![pad; batch * src_len],
            src_lens: Vec::with_capacity(batch),
            tgt_in: vec![pad; batch * tgt_len],
            tgt_out: vec![pad; batch * tgt_len],
            tgt_lens: Vec::with_capacity(batch),
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            b.src[i * src_len..i * src_len + s.len()].copy_from_slice(s);
            b.src_lens.push(s.len());
            b.tgt_in[i * tgt_len] = bos;
            b.tgt_in[i * tgt_len + 1..i * tgt_len + t.len()].copy_from_slice(&t[..t.len() - 1]);
            b.tgt_out[i * tgt_len..i * tgt_len + t.len()].copy_from_slice(t);
            b.tgt_lens.push(t.len());
        }
        Ok(b)
    }

    /// Non-pad target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let shape = |m: String| Err(Error::ShapeMismatch(m));
        if self.batch == 0 || self.src_len == 0 || self.tgt_len == 0 {
            return shape("empty batch".into());
        }
        if self.src.len() != self.batch * self.src_len
            || self.tgt_in.len() != self.batch * self.tgt_len
            || self.tgt_out.len() != self.batch * self.tgt_len
            || self.src_lens.len() != self.batch
            || self.tgt_lens.len() != self.batch
        {
            return shape("batch buffers disagree with batch x length".into());
        }
        for (lens, l) in [
            (&self.src_lens, self.src_len),
            (&self.tgt_lens, self.tgt_len),
        ] {
            if lens.iter().any(|&n| n == 0 || n > l) {
                return shape(format!("valid lengths must lie in [1, {l}]"));
            }
        }
        let longest = self.src_len.max(self.tgt_len);
        if longest > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: longest,
                max_len: cfg.max_len,
            });
        }
        Ok(())
    }
}

/// Per-step settings of a forward/backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub p_drop: f64,
    /// Label smoothing.
    pub alpha: f64,
    pub pad_id: usize,
    pub seed: u64,
    pub step: u64,
    /// The loss is multiplied by this before differentiation.
    pub loss_scale: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            p_drop: 0.0,
            alpha: 0.0,
            pad_id: 0,
            seed: 0,
            step: 0,
            loss_scale: 1.0,
        }
    }
}

/// Dropout site numbering: embeddings 1 and 2, encoder layer `i` sites
/// `100 + 10i + k`, decoder layer `j` sites `10000 + 10j + k`.
pub fn dropout_site_seed(opts: &StepOptions, site: u64) -> u64 {
    dropout_seed(opts.seed, opts.step, site)
}

fn layer_dropout(opts: &StepOptions, base: u64) -> LayerDropout {
    LayerDropout {
        p: opts.p_drop,
        seeds: std::array::from_fn(|k| dropout_site_seed(opts, base + k as u64)),
    }
}

/// Milestones of the backward pass, in the order they happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackwardEvent {
    /// Decoder layer `j` deposited its key/value gradient.
    CrossGradient(usize),
    DecoderLayer(usize),
    /// The encoder-output gradient was formed from all deposits.
    EncoderOutputGrad,
    EncoderLayer(usize),
    Embedding,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepResult {
    /// Sum of per-token losses (not scaled).
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
    pub events: Vec<BackwardEvent>,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelIds {
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    enc: Vec<EncoderLayerIds>,
    enc_ln: LnIds,
    cross_kv_w: ParamId,
    cross_kv_b: ParamId,
    dec: Vec<DecoderLayerIds>,
    dec_ln: LnIds,
    out_proj: Option<ParamId>,
}

/// Everything the backward pass needs from the forward pass, consumed in
/// reverse order.
pub struct ActivationStash<T> {
    enc_emb_mask: DropoutMask,
    dec_emb_mask: DropoutMask,
    enc: Vec<EncoderStash<T>>,
    enc_final: (ArenaBuf<T>, LnStash<T>),
    enc_out: ArenaBuf<T>,
    kv: Vec<(ArenaBuf<T>, ArenaBuf<T>)>,
    dec: Vec<DecoderStash<T>>,
    dec_final: (ArenaBuf<T>, LnStash<T>),
    dec_out: ArenaBuf<T>,
    /// Holds the scaled logit gradient after the criterion.
    d_logits: ArenaBuf<T>,
}

impl<T: Real> ActivationStash<T> {
    fn release(self, arena: &mut Arena<T>) {
        for s in self.enc {
            s.release(arena);
        }
        for s in self.dec {
            s.release(arena);
        }
        for (x, ln) in [self.enc_final, self.dec_final] {
            ln.release(arena);
            arena.give(x);
        }
        for (k, v) in self.kv {
            arena.give(k);
            arena.give(v);
        }
        arena.give(self.enc_out);
        arena.give(self.dec_out);
        arena.give(self.d_logits);
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    ids: ModelIds,
    pos_table: Vec<f64>,
}

fn ln_ids(l: &mut ParamLayout, prefix: &str, d: usize) -> Result<LnIds> {
    Ok(LnIds {
        w: l.push(&format!("{prefix}.w"), &[d])?,
        b: l.push(&format!("{prefix}.b"), &[d])?,
    })
}

fn self_attn_ids(l: &mut ParamLayout, prefix: &str, d: usize) -> Result<SelfAttnIds> {
    Ok(SelfAttnIds {
        qkv_w: l.push(&format!("{prefix}.qkv.w"), &[3 * d, d])?,
        qkv_b: l.push(&format!("{prefix}.qkv.b"), &[3 * d])?,
        out_w: l.push(&format!("{prefix}.out.w"), &[d, d])?,
        out_b: l.push(&format!("{prefix}.out.b"), &[d])?,
    })
}

fn ffn_ids(l: &mut ParamLayout, prefix: &str, d: usize, f: usize) -> Result<FfnIds> {
    Ok(FfnIds {
        w1: l.push(&format!("{prefix}.w1"), &[f, d])?,
        b1: l.push(&format!("{prefix}.b1"), &[f])?,
        w2: l.push(&format!("{prefix}.w2"), &[d, f])?,
        b2: l.push(&format!("{prefix}.b2"), &[d])?,
    })
}

impl Transformer {
    /// Registers every parameter. Names follow `enc.{i}.attn.qkv.w`,
    /// `dec.{j}.cross.q.w`, `cross_kv.w` (`[2nd x d]`, keys then values),
    /// `tok_emb`, `pos_emb` (learned positions only), `out_proj.w` (untied
    /// only). Weight matrices are `[out x in]`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
        let mut l = ParamLayout::new();
        let tok_emb = l.push("tok_emb", &[v, d])?;
        let pos_emb = if cfg.learned_positional {
            Some(l.push("pos_emb", &[cfg.max_len, d])?)
        } else {
            None
        };
        let mut enc = Vec::new();
        for i in 0..cfg.n_enc {
            let p = format!("enc.{i}");
            enc.push(EncoderLayerIds {
                ln1: ln_ids(&mut l, &format!("{p}.ln1"), d)?,
                attn: self_attn_ids(&mut l, &format!("{p}.attn"), d)?,
                ln2: ln_ids(&mut l, &format!("{p}.ln2"), d)?,
                ffn: ffn_ids(&mut l, &format!("{p}.ffn"), d, f)?,
            });
        }
        let enc_ln = ln_ids(&mut l, "enc_ln", d)?;
        let n = cfg.n_dec;
        let cross_kv_w = l.push("cross_kv.w", &[2 * n * d, d])?;
        let cross_kv_b = l.push("cross_kv.b", &[2 * n * d])?;
        let mut dec = Vec::new();
        for j in 0..n {
            let p = format!("dec.{j}");
            dec.push(DecoderLayerIds {
                ln1: ln_ids(&mut l, &format!("{p}.ln1"), d)?,
                self_attn: self_attn_ids(&mut l, &format!("{p}.self"), d)?,
                ln2: ln_ids(&mut l, &format!("{p}.ln2"), d)?,
                cross: CrossAttnIds {
                    q_w: l.push(&format!("{p}.cross.q.w"), &[d, d])?,
                    q_b: l.push(&format!("{p}.cross.q.b"), &[d])?,
                    out_w: l.push(&format!("{p}.cross.out.w"), &[d, d])?,
                    out_b: l.push(&format!("{p}.cross.out.b"), &[d])?,
                },
                ln3: ln_ids(&mut l, &format!("{p}.ln3"), d)?,
                ffn: ffn_ids(&mut l, &format!("{p}.ffn"), d, f)?,
            });
        }
        let dec_ln = ln_ids(&mut l, "dec_ln", d)?;
        let out_proj = if cfg.tie_embeddings {
            None
        } else {
            Some(l.push("out_proj.w", &[v, d])?)
        };
        let pos_table = if cfg.learned_positional {
            Vec::new()
        } else {
            sinusoidal_positions(cfg.max_len, d)
        };
        let ids = ModelIds {
            tok_emb,
            pos_emb,
            enc,
            enc_ln,
            cross_kv_w,
            cross_kv_b,
            dec,
            dec_ln,
            out_proj,
        };
        Ok(Self {
            cfg,
            layout: Arc::new(l),
            ids,
            pos_table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    fn dims(&self) -> Dims {
        Dims {
            d: self.cfg.d_model,
            heads: self.cfg.n_heads,
            d_ff: self.cfg.d_ff,
            eps: self.cfg.ln_eps,
        }
    }

    /// Initial values: LayerNorm gains 1, biases 0, weight matrices
    /// uniform in `±sqrt(6 / (fan_in + fan_out))`, embeddings uniform with
    /// standard deviation `d^-1/2`.
    pub fn init_params<T: Real>(&self, seed: u64) -> FlatParams<T> {
        let mut p = FlatParams::zeros(self.layout.clone());
        let rng = CounterRng::new(seed);
        let d = self.cfg.d_model as f64;
        for id in 0..self.layout.count() {
            let spec = self.layout.spec(id).clone();
            let r = rng.fork(id as u64);
            let fill = |out: &mut [T], a: f64| {
                for (i, v) in out.iter_mut().enumerate() {
                    *v = T::from_f64((2.0 * r.uniform(i as u64) - 1.0) * a);
                }
            };
            let out = p.get_mut(id);
            if spec.name == "tok_emb" || spec.name == "pos_emb" || spec.name == "out_proj.w" {
                fill(out, (3.0 / d).sqrt());
            } else if spec.shape.len() == 2 {
                fill(out, (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt());
            } else if spec.name.contains("ln") && spec.name.ends_with(".w") {
                out.iter_mut().for_each(|v| *v = T::one());
            }
        }
        p
    }

    fn positions<P: ParamSource<T> + ?Sized, T: Real>(
        &self,
        cx: &mut Ctx<'_, T, P>,
    ) -> Result<ArenaBuf<T>> {
        match self.ids.pos_emb {
            Some(id) => cx.load(id),
            None => {
                let mut b = cx.take(self.pos_table.len())?;
                b.iter_mut()
                    .zip(&self.pos_table)
                    .for_each(|(o, &v)| *o = T::from_f64(v));
                Ok(b)
            }
        }
    }

    fn embed<P: ParamSource<T> + ?Sized, T: Real>(
        &self,
        cx: &mut Ctx<'_, T, P>,
        tokens: &[usize],
        seq: Seq,
        mask: &DropoutMask,
    ) -> Result<ArenaBuf<T>> {
        let d = self.cfg.d_model;
        let table = cx.load(self.ids.tok_emb)?;
        let pos = self.positions(cx)?;
        let mut x = cx.take(seq.rows() * d)?;
        let r = embedding_forward_into(
            &table,
            &pos,
            d,
            tokens,
            seq.len,
            &self.cfg.embedding(),
            mask,
            &mut x,
        );
        cx.give(table);
        cx.give(pos);
        r.map(|_| x)
    }

    fn output_weight(&self) -> ParamId {
        self.ids.out_proj.unwrap_or(self.ids.tok_emb)
    }

    fn forward<T: Real, P: ParamSource<T> + ?Sized>(
        &self,
        cx: &mut Ctx<'_, T, P>,
        batch: &Batch,
        opts: &StepOptions,
    ) -> Result<(ActivationStash<T>, StepResult)> {
        batch.validate(&self.cfg)?;
        let dims = self.dims();
        let (d, v, n) = (self.cfg.d_model, self.cfg.vocab, self.cfg.n_dec);
        let src = Seq {
            batch: batch.batch,
            len: batch.src_len,
        };
        let tgt = Seq {
            batch: batch.batch,
            len: batch.tgt_len,
        };
        let src_mask = AttentionMask::Padding(batch.src_lens.clone());
        let tgt_mask = AttentionMask::CausalPadding(batch.tgt_lens.clone());

        let enc_emb_mask =
            DropoutMask::generate(dropout_site_seed(opts, 1), opts.p_drop, src.rows() * d)?;
        let mut x = self.embed(cx, &batch.src, src, &enc_emb_mask)?;
        let mut enc = Vec::with_capacity(self.cfg.n_enc);
        for (i, ids) in self.ids.enc.iter().enumerate() {
            let drop = layer_dropout(opts, 100 + 10 * i as u64);
            let (y, st) = encoder_layer_forward(cx, ids, x, src, &src_mask, &drop, dims)?;
            enc.push(st);
            x = y;
        }
        let (enc_out, enc_ln) = ln_forward(cx, self.ids.enc_ln, &x, dims)?;

        // One GEMM for every decoder layer's keys and values, then split.
        let wide = 2 * n * d;
        let w = cx.load(self.ids.cross_kv_w)?;
        let mut kv_all = cx.take(src.rows() * wide)?;
        packed_kv_project_into(&enc_out, d, &w, &mut kv_all);
        cx.give(w);
        let bias = cx.load(self.ids.cross_kv_b)?;
        let gs = src.heads(dims.heads, dims.head_dim());
        let mut kv = Vec::with_capacity(n);
        for j in 0..n {
            let (kc, vc) = (j * d, (n + j) * d);
            let mut k = cx.take(src.rows() * d)?;
            split_heads_bias(&kv_all, wide, kc, &bias[kc..kc + d], gs, &mut k);
            let mut vv = cx.take(src.rows() * d)?;
            split_heads_bias(&kv_all, wide, vc, &bias[vc..vc + d], gs, &mut vv);
            kv.push((k, vv));
        }
        cx.give(bias);
        cx.give(kv_all);

        let dec_emb_mask =
            DropoutMask::generate(dropout_site_seed(opts, 2), opts.p_drop, tgt.rows() * d)?;
        let mut y = self.embed(cx, &batch.tgt_in, tgt, &dec_emb_mask)?;
        let mut dec = Vec::with_capacity(n);
        for (j, ids) in self.ids.dec.iter().enumerate() {
            let drop = layer_dropout(opts, 10_000 + 10 * j as u64);
            let ckv = CrossKv {
                k: &kv[j].0,
                v: &kv[j].1,
                src,
            };
            let (out, st) =
                decoder_layer_forward(cx, ids, y, tgt, &tgt_mask, &ckv, &src_mask, &drop, dims)?;
            dec.push(st);
            y = out;
        }
        let (dec_out, dec_ln) = ln_forward(cx, self.ids.dec_ln, &y, dims)?;

        let w = cx.load(self.output_weight())?;
        let mut logits = cx.take(tgt.rows() * v)?;
        gemm_into(
            GemmDims {
                m: tgt.rows(),
                n: v,
                k: d,
            },
            &dec_out,
            false,
            &w,
            true,
            &mut logits,
            false,
        );
        cx.give(w);
        let stats = fused_criterion_in_place(
            &mut logits,
            v,
            &batch.tgt_out,
            opts.alpha,
            Some(opts.pad_id),
            T::from_f64(opts.loss_scale),
        )?;
        let stash = ActivationStash {
            enc_emb_mask,
            dec_emb_mask,
            enc,
            enc_final: (x, enc_ln),
            enc_out,
            kv,
            dec,
            dec_final: (y, dec_ln),
            dec_out,
            d_logits: logits,
        };
        let result = StepResult {
            loss: stats.loss,
            tokens: stats.tokens,
            correct: stats.correct,
            events: Vec::new(),
        };
        Ok((stash, result))
    }

    fn backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
        &self,
        cx: &mut Ctx<'_, T, P>,
        batch: &Batch,
        stash: ActivationStash<T>,
        sink: &mut G,
        events: &mut Vec<BackwardEvent>,
    ) -> Result<()> {
        let dims = self.dims();
        let (d, v, n) = (self.cfg.d_model, self.cfg.vocab, self.cfg.n_dec);
        let emb = self.cfg.embedding();
        let src = Seq {
            batch: batch.batch,
            len: batch.src_len,
        };
        let tgt = Seq {
            batch: batch.batch,
            len: batch.tgt_len,
        };
        let ActivationStash {
            enc_emb_mask,
            dec_emb_mask,
            mut enc,
            enc_final,
            enc_out,
            kv,
            mut dec,
            dec_final,
            dec_out,
            d_logits,
        } = stash;

        // Output projection.
        let w = cx.load(self.output_weight())?;
        let mut d_dec_out = cx.take(tgt.rows() * d)?;
        gemm_into(
            GemmDims {
                m: tgt.rows(),
                n: d,
                k: v,
            },
            &d_logits,
            false,
            &w,
            false,
            &mut d_dec_out,
            false,
        );
        cx.give(w);
        let mut d_tok = cx.take(v * d)?;
        gemm_into(
            GemmDims {
                m: v,
                n: d,
                k: tgt.rows(),
            },
            &d_logits,
            true,
            &dec_out,
            false,
            &mut d_tok,
            false,
        );
        if let Some(id) = self.ids.out_proj {
            sink.accumulate(id, &d_tok);
            d_tok.fill(T::zero());
        }
        cx.give(d_logits);
        cx.give(dec_out);

        let (y, ln) = dec_final;
        let mut dy = ln_backward(cx, self.ids.dec_ln, &d_dec_out, &y, ln, dims, sink)?;
        cx.give(d_dec_out);
        cx.give(y);

        let wide = 2 * n * d;
        let mut d_kv = cx.take(src.rows() * wide)?;
        let mut state = CrossGradState::new(n);
        for j in (0..n).rev() {
            let st = dec.pop().expect("one stash entry per decoder layer");
            let ckv = CrossKv {
                k: &kv[j].0,
                v: &kv[j].1,
                src,
            };
            let cols = (j * d, (n + j) * d);
            dy = decoder_layer_backward(
                cx,
                &self.ids.dec[j],
                dy,
                st,
                &ckv,
                &mut d_kv,
                wide,
                cols,
                dims,
                sink,
            )?;
            state.mark(j);
            events.push(BackwardEvent::CrossGradient(j));
            events.push(BackwardEvent::DecoderLayer(j));
        }

        let mut d_emb = cx.take(v * d)?;
        let mut d_pos = match self.ids.pos_emb {
            Some(_) => Some(cx.take(self.cfg.max_len * d)?),
            None => None,
        };
        embedding_backward_into(
            &dy,
            d,
            &batch.tgt_in,
            tgt.len,
            &emb,
            &dec_emb_mask,
            &mut d_emb,
            d_pos.as_deref_mut(),
        )?;
        add(&mut d_tok, &d_emb);
        cx.give(dy);

        // Encoder-output gradient, once every decoder layer has deposited.
        state.check_complete()?;
        let w = cx.load(self.ids.cross_kv_w)?;
        let mut d_enc_out = cx.take(src.rows() * d)?;
        let mut dw = cx.take(wide * d)?;
        let mut db = cx.take(wide)?;
        packed_kv_backward_into(&d_kv, &enc_out, d, &w, &mut d_enc_out, &mut dw, &mut db);
        sink.accumulate(self.ids.cross_kv_w, &dw);
        sink.accumulate(self.ids.cross_kv_b, &db);
        events.push(BackwardEvent::EncoderOutputGrad);
        for b in [w, dw, db, d_kv, enc_out] {
            cx.give(b);
        }
        for (k, vv) in kv {
            cx.give(k);
            cx.give(vv);
        }

        let (x, ln) = enc_final;
        let mut dx = ln_backward(cx, self.ids.enc_ln, &d_enc_out, &x, ln, dims, sink)?;
        cx.give(d_enc_out);
        cx.give(x);
        for i in (0..self.cfg.n_enc).rev() {
            let st = enc.pop().expect("one stash entry per encoder layer");
            dx = encoder_layer_backward(cx, &self.ids.enc[i], dx, st, dims, sink)?;
            events.push(BackwardEvent::EncoderLayer(i));
        }

        let mut d_pos_enc = match self.ids.pos_emb {
            Some(_) => Some(cx.take(self.cfg.max_len * d)?),
            None => None,
        };
        embedding_backward_into(
            &dx,
            d,
            &batch.src,
            src.len,
            &emb,
            &enc_emb_mask,
            &mut d_emb,
            d_pos_enc.as_deref_mut(),
        )?;
        add(&mut d_tok, &d_emb);
        sink.accumulate(self.ids.tok_emb, &d_tok);
        if let (Some(id), Some(mut a), Some(b)) = (self.ids.pos_emb, d_pos, d_pos_enc) {
            add(&mut a, &b);
            sink.accumulate(id, &a);
            cx.give(a);
            cx.give(b);
        }
        events.push(BackwardEvent::Embedding);
        cx.give(dx);
        cx.give(d_emb);
        cx.give(d_tok);
        Ok(())
    }

    /// Forward and backward over one batch. Gradients of
    /// `loss_scale * Σ token losses` are added to `sink`.
    pub fn forward_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
        &self,
        params: &P,
        batch: &Batch,
        opts: &StepOptions,
        arena: &mut Arena<T>,
        sink: &mut G,
    ) -> Result<StepResult> {
        arena.begin_pass()?;
        let mut cx = Ctx {
            layout: &self.layout,
            params,
            arena,
        };
        let (stash, mut result) = self.forward(&mut cx, batch, opts)?;
        self.backward(&mut cx, batch, stash, sink, &mut result.events)?;
        arena.end_pass()?;
        Ok(result)
    }

    /// Loss and accuracy without a backward pass.
    pub fn forward_loss<T: Real, P: ParamSource<T> + ?Sized>(
        &self,
        params: &P,
        batch: &Batch,
        opts: &StepOptions,
        arena: &mut Arena<T>,
    ) -> Result<StepResult> {
        arena.begin_pass()?;
        let mut cx = Ctx {
            layout: &self.layout,
            params,
            arena,
        };
        let (stash, result) = self.forward(&mut cx, batch, opts)?;
        stash.release(arena);
        arena.end_pass()?;
        Ok(result)
    }
}

/// One layer of the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Encoder(usize),
    Decoder(usize),
}

/// Inputs of [`Transformer::layer_forward_backward`]. Row-major `[batch *
/// len x d]` activations; the encoder fields are read by decoder layers.
pub struct LayerPass<'a, T> {
    pub x: &'a [T],
    pub batch: usize,
    pub len: usize,
    pub lens: &'a [usize],
    pub enc: Option<&'a [T]>,
    pub src_len: usize,
    pub src_lens: &'a [usize],
    /// Output gradient; `None` runs the forward only.
    pub dy: Option<&'a [T]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub y: Vec<T>,
    /// Empty for a forward-only pass.
    pub dx: Vec<T>,
    pub d_enc: Option<Vec<T>>,
}

impl Transformer {
    /// Forward one layer and backpropagate `input.dy`, if given, using
    /// the same kernels and dropout sites as the full pass. A decoder layer
    /// reads its keys and values from the packed projection of `enc`.
    pub fn layer_forward_backward<T: Real, P: ParamSource<T> + ?Sized, G: GradSink<T> + ?Sized>(
        &self,
        params: &P,
        kind: LayerKind,
        input: &LayerPass<'_, T>,
        opts: &StepOptions,
        arena: &mut Arena<T>,
        sink: &mut G,
    ) -> Result<LayerGrads<T>> {
        let dims = self.dims();
        let (d, n) = (self.cfg.d_model, self.cfg.n_dec);
        let seq = Seq {
            batch: input.batch,
            len: input.len,
        };
        if input.x.len() != seq.rows() * d
            || input.dy.is_some_and(|dy| dy.len() != input.x.len())
            || input.lens.len() != input.batch
        {
            return Err(Error::ShapeMismatch("layer input".into()));
        }
        let mut cx = Ctx {
            layout: &self.layout,
            params,
            arena,
        };
        let x = cx.arena.take_copy(input.x)?;
        match kind {
            LayerKind::Encoder(i) => {
                let ids = self
                    .ids
                    .enc
                    .get(i)
                    .ok_or_else(|| Error::ShapeMismatch(format!("no encoder layer {i}")))?;
                let drop = layer_dropout(opts, 100 + 10 * i as u64);
                let mask = AttentionMask::Padding(input.lens.to_vec());
                let (y, st) = encoder_layer_forward(&mut cx, ids, x, seq, &mask, &drop, dims)?;
                let y_out = y.to_vec();
                cx.give(y);
                let Some(dy) = input.dy else {
                    st.release(cx.arena);
                    return Ok(LayerGrads {
                        y: y_out,
                        dx: Vec::new(),
                        d_enc: None,
                    });
                };
                let dy = cx.arena.take_copy(dy)?;
                let dx = encoder_layer_backward(&mut cx, ids, dy, st, dims, sink)?;
                let dx_out = dx.to_vec();
                cx.give(dx);
                Ok(LayerGrads {
                    y: y_out,
                    dx: dx_out,
                    d_enc: None,
                })
            }
            LayerKind::Decoder(j) => {
                let ids = self
                    .ids
                    .dec
                    .get(j)
                    .ok_or_else(|| Error::ShapeMismatch(format!("no decoder layer {j}")))?;
                let src = Seq {
                    batch: input.batch,
                    len: input.src_len,
                };
                let enc = input
                    .enc
                    .ok_or_else(|| Error::ShapeMismatch("decoder layer needs enc".into()))?;
                if enc.len() != src.rows() * d || input.src_lens.len() != input.batch {
                    return Err(Error::ShapeMismatch("encoder output".into()));
                }
                let wide = 2 * n * d;
                let w = cx.load(self.ids.cross_kv_w)?;
                let mut kv_all = cx.take(src.rows() * wide)?;
                packed_kv_project_into(enc, d, &w, &mut kv_all);
                let bias = cx.load(self.ids.cross_kv_b)?;
                let gs = src.heads(dims.heads, dims.head_dim());
                let (kc, vc) = (j * d, (n + j) * d);
                let mut k = cx.take(src.rows() * d)?;
                split_heads_bias(&kv_all, wide, kc, &bias[kc..kc + d], gs, &mut k);
                let mut v = cx.take(src.rows() * d)?;
                split_heads_bias(&kv_all, wide, vc, &bias[vc..vc + d], gs, &mut v);
                cx.give(bias);
                cx.give(kv_all);
                let drop = layer_dropout(opts, 10_000 + 10 * j as u64);
                let self_mask = AttentionMask::CausalPadding(input.lens.to_vec());
                let src_mask = AttentionMask::Padding(input.src_lens.to_vec());
                let ckv = CrossKv { k: &k, v: &v, src };
                let (y, st) = decoder_layer_forward(
                    &mut cx, ids, x, seq, &self_mask, &ckv, &src_mask, &drop, dims,
                )?;
                let y_out = y.to_vec();
                cx.give(y);
                let Some(dy) = input.dy else {
                    st.release(cx.arena);
                    for b in [w, k, v] {
                        cx.give(b);
                    }
                    return Ok(LayerGrads {
                        y: y_out,
                        dx: Vec::new(),
                        d_enc: None,
                    });
                };
                let dy = cx.arena.take_copy(dy)?;
                let mut d_kv = cx.take(src.rows() * wide)?;
                let dx = decoder_layer_backward(
                    &mut cx,
                    ids,
                    dy,
                    st,
                    &ckv,
                    &mut d_kv,
                    wide,
                    (kc, vc),
                    dims,
                    sink,
                )?;
                let dx_out = dx.to_vec();
                cx.give(dx);
                let mut d_enc = cx.take(src.rows() * d)?;
                let mut dw = cx.take(wide * d)?;
                let mut db = cx.take(wide)?;
                packed_kv_backward_into(&d_kv, enc, d, &w, &mut d_enc, &mut dw, &mut db);
                sink.accumulate(self.ids.cross_kv_w, &dw);
                sink.accumulate(self.ids.cross_kv_b, &db);
                let d_enc_out = d_enc.to_vec();
                for b in [w, k, v, d_kv, d_enc, dw, db] {
                    cx.give(b);
                }
                Ok(LayerGrads {
                    y: y_out,
                    dx: dx_out,
                    d_enc: Some(d_enc_out),
                })
            }
        }
    }
}

impl Transformer {
    /// A batch at the corner of `stats`, every token a non-special symbol.
    pub fn worst_case_batch(&self, stats: &DatasetStats) -> Result<Batch> {
        self.corner_batch(&Corner {
            count: stats.max_batch.max(1),
            src: stats.max_src_len,
            tgt: stats.max_tgt_len,
        })
    }

    pub fn corner_batch(&self, c: &Corner) -> Result<Batch> {
        let sym = 2.min(self.cfg.vocab - 1);
        let pair = (vec![sym; c.src], vec![sym; c.tgt]);
        Batch::from_pairs(&vec![pair; c.count], 0, 1)
    }

    /// Traces one training (or, with `training = false`, loss-only) pass
    /// at each corner of `stats` and plans the merged temporaries.
    pub fn estimate_capacity<T: Real>(
        &self,
        stats: &DatasetStats,
        training: bool,
    ) -> Result<Capacity> {
        let corners = stats.corners();
        let params = self.init_params::<T>(0);
        let opts = StepOptions::default();
        estimate_capacity_over(corners.len(), |i, arena| {
            let batch = self.corner_batch(&corners[i])?;
            if training {
                self.forward_backward(&params, &batch, &opts, arena, &mut NullSink)
                    .map(|_| ())
            } else {
                self.forward_loss(&params, &batch, &opts, arena).map(|_| ())
            }
        })
    }
}

fn add<T: Real>(acc: &mut [T], x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs() -> Vec<(Vec<usize>, Vec<usize>)> {
        vec![
            (vec![2, 3, 4, 5], vec![5, 4, 3]),
            (vec![6, 2], vec![2, 6, 6, 3]),
        ]
    }

    fn setup(tie: bool, learned: bool) -> (Transformer, FlatParams<f64>, Batch) {
        let mut cfg = ModelConfig::tiny(1, 2, 4, 7, 6);
        cfg.tie_embeddings = tie;
        cfg.learned_positional = learned;
        let m = Transformer::new(cfg).unwrap();
        let p = m.init_params::<f64>(11);
        let b = Batch::from_pairs(&pairs(), 0, 1).unwrap();
        (m, p, b)
    }

    #[test]
    fn batch_shifts_targets() {
        let b = Batch::from_pairs(&pairs(), 0, 1).unwrap();
        assert_eq!(b.tgt_in, vec![1, 5, 4, 0, 1, 2, 6, 6]);
        assert_eq!(b.tgt_out, vec![5, 4, 3, 0, 2, 6, 6, 3]);
        assert_eq!(b.src, vec![2, 3, 4, 5, 6, 2, 0, 0]);
        assert_eq!(b.target_tokens(), 7);
    }

    #[test]
    fn zero_logits_give_log_vocab() {
        let (m, mut p, b) = setup(false, false);
        p.by_name_mut("out_proj.w").unwrap().fill(0.0);
        let r = m
            .forward_loss(&p, &b, &StepOptions::default(), &mut Arena::heap())
            .unwrap();
        assert_eq!(r.tokens, 7);
        assert!((r.loss - 7.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn events_follow_reverse_order() {
        let (m, p, b) = setup(true, false);
        let mut g = FlatParams::zeros(m.layout().clone());
        let r = m
            .forward_backward(&p, &b, &StepOptions::default(), &mut Arena::heap(), &mut g)
            .unwrap();
        use BackwardEvent::*;
        assert_eq!(
            r.events,
            vec![
                CrossGradient(1),
                DecoderLayer(1),
                CrossGradient(0),
                DecoderLayer(0),
                EncoderOutputGrad,
                EncoderLayer(0),
                Embedding
            ]
        );
    }

    fn check_fd(tie: bool, learned: bool, opts: StepOptions) {
        let (m, p, b) = setup(tie, learned);
        let mut g = FlatParams::zeros(m.layout().clone());
        m.forward_backward(&p, &b, &opts, &mut Arena::heap(), &mut g)
            .unwrap();
        let loss = |q: &FlatParams<f64>| {
            m.forward_loss(q, &b, &opts, &mut Arena::heap())
                .unwrap()
                .loss
                * opts.loss_scale
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.data().len() {
            let mut q = p.clone();
            q.data_mut()[i] += h;
            let up = loss(&q);
            q.data_mut()[i] -= 2.0 * h;
            let down = loss(&q);
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_fd(true, false, StepOptions::default());
    }

    #[test]
    fn gradients_match_with_dropout_smoothing_and_untied() {
        let opts = StepOptions {
            p_drop: 0.2,
            alpha: 0.1,
            seed: 5,
            step: 3,
            loss_scale: 4.0,
            ..Default::default()
        };
        check_fd(false, true, opts);
    }

    #[test]
    fn padding_does_not_leak() {
        let (m, p, b) = setup(true, false);
        let mut b2 = b.clone();
        // Change pad positions of the source and decoder input.
        b2.src[6] = 3;
        b2.src[7] = 4;
        b2.tgt_in[3] = 5;
        let opts = StepOptions::default();
        let r1 = m.forward_loss(&p, &b, &opts, &mut Arena::heap()).unwrap();
        let r2 = m.forward_loss(&p, &b2, &opts, &mut Arena::heap()).unwrap();
        assert!((r1.loss - r2.loss).abs() < 1e-12);
    }

    #[test]
    fn future_targets_do_not_affect_earlier_positions() {
        let (m, p, _) = setup(true, false);
        let one = |tgt: Vec<usize>| {
            let b = Batch::from_pairs(&[(vec![2, 3, 4], tgt)], 0, 1).unwrap();
            let mut b0 = b.clone();
            // Only the first prediction counts.
            b0.tgt_out[1..].fill(0);
            m.forward_loss(&p, &b0, &StepOptions::default(), &mut Arena::heap())
                .unwrap()
                .loss
        };
        assert!((one(vec![5, 6, 2]) - one(vec![5, 2, 4])).abs() < 1e-12);
    }

    #[test]
    fn planned_arena_reuses_trace() {
        let (m, p, b) = setup(true, false);
        let opts = StepOptions::default();
        let mut tr = Arena::trace();
        let mut g1 = FlatParams::zeros(m.layout().clone());
        let r1 = m.forward_backward(&p, &b, &opts, &mut tr, &mut g1).unwrap();
        let lt = tr.lifetimes().unwrap();
        let plan = crate::memplan::plan(&lt).unwrap();
        let mut ar = Arena::planned(&plan, &lt).unwrap();
        for _ in 0..2 {
            let mut g2 = FlatParams::zeros(m.layout().clone());
            let r2 = m.forward_backward(&p, &b, &opts, &mut ar, &mut g2).unwrap();
            assert_eq!(r1.loss, r2.loss);
            assert_eq!(g1.data(), g2.data());
        }
        assert_eq!(ar.stats().reallocations, 0);
        assert_eq!(ar.outstanding(), 0);
        assert!(plan.peak < crate::memplan::naive_total(&lt));
    }

    #[test]
    fn capacity_covers_smaller_batches() {
        let (m, p, b) = setup(true, false);
        let stats = DatasetStats {
            max_batch: 3,
            max_src_len: 5,
            max_tgt_len: 6,
            batch_tokens: None,
        };
        let cap = m.estimate_capacity::<f64>(&stats, true).unwrap();
        let mut arena = cap.arena::<f64>().unwrap();
        let mut g = FlatParams::zeros(m.layout().clone());
        m.forward_backward(&p, &b, &StepOptions::default(), &mut arena, &mut g)
            .unwrap();
        let worst = m.worst_case_batch(&stats).unwrap();
        m.forward_backward(&p, &worst, &StepOptions::default(), &mut arena, &mut g)
            .unwrap();
        let st = arena.stats();
        assert_eq!(st.reallocations, 0);
        assert!(st.live_high_water <= cap.bound());
        let eval = m.estimate_capacity::<f64>(&stats, false).unwrap();
        let mut ea = eval.arena::<f64>().unwrap();
        m.forward_loss(&p, &b, &StepOptions::default(), &mut ea)
            .unwrap();
        assert_eq!(ea.stats().reallocations, 0);
    }

    #[test]
    fn null_sink_and_bad_batch() {
        let (m, p, mut b) = setup(true, false);
        m.forward_backward(
            &p,
            &b,
            &StepOptions::default(),
            &mut Arena::heap(),
            &mut NullSink,
        )
        .unwrap();
        b.tgt_out[0] = 99;
        assert!(m
            .forward_loss(&p, &b, &StepOptions::default(), &mut Arena::heap())
            .is_err());
    }
}
