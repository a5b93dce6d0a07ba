//! Reference encoder-decoder on the tape.
//!
//! Same function as the fused model, computed differently: every primitive
//! is a separate node, heads are sliced out one at a time, and each decoder
//! layer projects the encoder output with its own key/value weights (rows
//! of `cross_kv.w`) rather than one packed GEMM.

use std::collections::HashMap;

use crate::error::Result;
use crate::model::{Batch, FlatParams, ModelConfig, StepOptions};

use super::ops::{sinusoid_table, Mat};
use super::rng::{dropout_factors, site_seed};
use super::tape::{Tape, Var};

/// Loss and parameter gradients from the reference.
pub struct RefOutput {
    /// Sum of per-token losses.
    pub loss: f64,
    pub tokens: usize,
    /// Gradient of `loss_scale * loss`, or `None` for a forward-only run.
    pub grads: Option<FlatParams<f64>>,
}

/// Which keys each attention row sees.
#[derive(Clone, Debug)]
pub enum Visible {
    /// Batch element `b` sees its first `lens[b]` keys.
    Prefix(Vec<usize>),
    /// Query `i` of batch element `b` sees `min(lens[b], i + 1)` keys.
    CausalPrefix(Vec<usize>),
}

impl Visible {
    fn limit(&self, b: usize, i: usize) -> usize {
        match self {
            Visible::Prefix(l) => l[b],
            Visible::CausalPrefix(l) => l[b].min(i + 1),
        }
    }
}

struct Builder<'a> {
    t: Tape,
    cfg: &'a ModelConfig,
    params: &'a FlatParams<f64>,
    leaves: HashMap<String, Var>,
    opts: StepOptions,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ModelConfig, params: &'a FlatParams<f64>, opts: StepOptions) -> Self {
        Self {
            t: Tape::new(),
            cfg,
            params,
            leaves: HashMap::new(),
            opts,
        }
    }

    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.leaves.get(name) {
            return v;
        }
        let data = self
            .params
            .by_name(name)
            .unwrap_or_else(|_| panic!("parameter `{name}`"))
            .to_vec();
        let shape = self
            .params
            .layout()
            .spec(self.params.layout().id(name).unwrap())
            .shape
            .clone();
        let (rows, cols) = if shape.len() == 2 {
            (shape[0], shape[1])
        } else {
            (1, data.len())
        };
        let v = self.t.leaf(Mat::new(rows, cols, data));
        self.leaves.insert(name.to_string(), v);
        v
    }

    fn dropout(&mut self, x: Var, site: u64) -> Var {
        let m = self.t.value(x);
        let len = m.rows * m.cols;
        let f = dropout_factors(
            site_seed(self.opts.seed, self.opts.step, site),
            self.opts.p_drop,
            len,
        );
        self.t.mul_const(x, f)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let wv = self.p(w);
        let bv = self.p(b);
        let y = self.t.matmul(x, false, wv, true);
        self.t.add_row_bias(y, bv)
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.t.layernorm(x, w, b, self.cfg.ln_eps)
    }

    /// Multi-head attention, one (batch, head) pair at a time. `q` is
    /// `batch*lq x d`, `k` and `v` are `batch*lk x d`.
    fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        vis: &Visible,
    ) -> Var {
        let (d, h) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / h;
        let mut rows = Vec::new();
        for b in 0..batch {
            let mut heads = Vec::new();
            for hh in 0..h {
                let qb = self.t.block(q, b * lq, hh * dh, lq, dh);
                let kb = self.t.block(k, b * lk, hh * dh, lk, dh);
                let vb = self.t.block(v, b * lk, hh * dh, lk, dh);
                let s = self.t.matmul(qb, false, kb, true);
                let s = self.t.scale(s, 1.0 / (dh as f64).sqrt());
                let limits = (0..lq).map(|i| vis.limit(b, i)).collect();
                let p = self.t.softmax(s, limits);
                heads.push(self.t.matmul(p, false, vb, false));
            }
            rows.push(self.t.concat_cols(heads));
        }
        self.t.concat_rows(rows)
    }

    /// `x + Drop(Wo · ctx + bo)`.
    fn attn_tail(&mut self, x: Var, ctx: Var, prefix: &str, site: u64) -> Var {
        let o = self.linear(ctx, &format!("{prefix}.out.w"), &format!("{prefix}.out.b"));
        let o = self.dropout(o, site);
        self.t.add(x, o)
    }

    fn self_attention(
        &mut self,
        x: Var,
        prefix: &str,
        ln: &str,
        batch: usize,
        len: usize,
        vis: &Visible,
        site: u64,
    ) -> Var {
        let d = self.cfg.d_model;
        let rows = batch * len;
        let u = self.ln(x, ln);
        let qkv = self.linear(u, &format!("{prefix}.qkv.w"), &format!("{prefix}.qkv.b"));
        let q = self.t.block(qkv, 0, 0, rows, d);
        let k = self.t.block(qkv, 0, d, rows, d);
        let v = self.t.block(qkv, 0, 2 * d, rows, d);
        let ctx = self.attention(q, k, v, batch, len, len, vis);
        self.attn_tail(x, ctx, prefix, site)
    }

    fn ffn(&mut self, x: Var, prefix: &str, ln: &str, sites: (u64, u64)) -> Var {
        let u = self.ln(x, ln);
        let h = self.linear(u, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let a = self.t.relu(h);
        let a = self.dropout(a, sites.0);
        let o = self.linear(a, &format!("{prefix}.w2"), &format!("{prefix}.b2"));
        let o = self.dropout(o, sites.1);
        self.t.add(x, o)
    }

    fn encoder_layer(&mut self, x: Var, i: usize, batch: usize, len: usize, vis: &Visible) -> Var {
        let base = 100 + 10 * i as u64;
        let p = format!("enc.{i}");
        let x = self.self_attention(
            x,
            &format!("{p}.attn"),
            &format!("{p}.ln1"),
            batch,
            len,
            vis,
            base,
        );
        self.ffn(
            x,
            &format!("{p}.ffn"),
            &format!("{p}.ln2"),
            (base + 1, base + 2),
        )
    }

    /// Keys and values of decoder layer `j` from its own slice of the
    /// cross projection.
    fn cross_kv(&mut self, enc: Var, j: usize) -> (Var, Var) {
        let (d, n) = (self.cfg.d_model, self.cfg.n_dec);
        let w = self.p("cross_kv.w");
        let b = self.p("cross_kv.b");
        let mut out = Vec::new();
        for row in [j * d, (n + j) * d] {
            let wj = self.t.block(w, row, 0, d, d);
            let bj = self.t.block(b, 0, row, 1, d);
            let y = self.t.matmul(enc, false, wj, true);
            out.push(self.t.add_row_bias(y, bj));
        }
        (out[0], out[1])
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &mut self,
        y: Var,
        j: usize,
        enc: Var,
        batch: usize,
        (lt, ls): (usize, usize),
        self_vis: &Visible,
        src_vis: &Visible,
    ) -> Var {
        let base = 10_000 + 10 * j as u64;
        let p = format!("dec.{j}");
        let y = self.self_attention(
            y,
            &format!("{p}.self"),
            &format!("{p}.ln1"),
            batch,
            lt,
            self_vis,
            base,
        );
        let u = self.ln(y, &format!("{p}.ln2"));
        let q = self.linear(u, &format!("{p}.cross.q.w"), &format!("{p}.cross.q.b"));
        let (k, v) = self.cross_kv(enc, j);
        let ctx = self.attention(q, k, v, batch, lt, ls, src_vis);
        let y = self.attn_tail(y, ctx, &format!("{p}.cross"), base + 1);
        self.ffn(
            y,
            &format!("{p}.ffn"),
            &format!("{p}.ln3"),
            (base + 2, base + 3),
        )
    }

    fn embed(&mut self, tokens: &[usize], len: usize, site: u64) -> Var {
        let d = self.cfg.d_model;
        let table = self.p("tok_emb");
        let pos = if self.cfg.learned_positional {
            self.p("pos_emb")
        } else {
            self.t.leaf(sinusoid_table(self.cfg.max_len, d))
        };
        let tok = self.t.gather_rows(table, tokens.to_vec());
        let tok = self.t.scale(tok, self.cfg.scale() as f64);
        let at = self
            .t
            .gather_rows(pos, (0..tokens.len()).map(|r| r % len).collect());
        let x = self.t.add(tok, at);
        self.dropout(x, site)
    }

    fn grads(&self, g: &[Option<Mat>]) -> FlatParams<f64> {
        let mut out = FlatParams::zeros(self.params.layout().clone());
        for (name, &v) in &self.leaves {
            if let Some(m) = &g[v] {
                out.by_name_mut(name).unwrap().copy_from_slice(&m.data);
            }
        }
        out
    }
}

/// Loss of the whole model and, if `with_grads`, the gradient of
/// `loss_scale * loss` with respect to every parameter.
pub fn reference_forward_backward(
    cfg: &ModelConfig,
    params: &FlatParams<f64>,
    batch: &Batch,
    opts: &StepOptions,
    with_grads: bool,
) -> Result<RefOutput> {
    batch.validate(cfg)?;
    let mut bld = Builder::new(cfg, params, *opts);
    let (bs, ls, lt) = (batch.batch, batch.src_len, batch.tgt_len);
    let src_vis = Visible::Prefix(batch.src_lens.clone());
    let tgt_vis = Visible::CausalPrefix(batch.tgt_lens.clone());

    let mut x = bld.embed(&batch.src, ls, 1);
    for i in 0..cfg.n_enc {
        x = bld.encoder_layer(x, i, bs, ls, &src_vis);
    }
    let enc = bld.ln(x, "enc_ln");
    let mut y = bld.embed(&batch.tgt_in, lt, 2);
    for j in 0..cfg.n_dec {
        y = bld.decoder_layer(y, j, enc, bs, (lt, ls), &tgt_vis, &src_vis);
    }
    let y = bld.ln(y, "dec_ln");
    let w = bld.p(if cfg.tie_embeddings {
        "tok_emb"
    } else {
        "out_proj.w"
    });
    let logits = bld.t.matmul(y, false, w, true);
    let logq = bld.t.log_softmax(logits);
    let loss_var = bld
        .t
        .smoothed_nll(logq, &batch.tgt_out, opts.alpha, Some(opts.pad_id));
    let loss = bld.t.value(loss_var).data[0];
    let tokens = batch.tgt_out.iter().filter(|&&t| t != opts.pad_id).count();
    let grads = with_grads.then(|| {
        let g = bld
            .t
            .backward(loss_var, Mat::new(1, 1, vec![opts.loss_scale]));
        bld.grads(&g)
    });
    Ok(RefOutput {
        loss,
        tokens,
        grads,
    })
}

pub use crate::model::LayerKind;

/// Shapes and masks for [`reference_layer`]. `enc` and the source fields
/// are only read for decoder layers.
pub struct LayerInput<'a> {
    pub x: &'a Mat,
    pub batch: usize,
    pub len: usize,
    pub lens: &'a [usize],
    pub enc: Option<&'a Mat>,
    pub src_len: usize,
    pub src_lens: &'a [usize],
}

pub struct LayerOutput {
    pub y: Mat,
    pub dx: Mat,
    /// Gradient with respect to the encoder output (decoder layers).
    pub d_enc: Option<Mat>,
    /// Zero except for the parameters this layer reads.
    pub grads: FlatParams<f64>,
}

/// Forward one layer and backpropagate `dy` through it.
pub fn reference_layer(
    cfg: &ModelConfig,
    params: &FlatParams<f64>,
    kind: LayerKind,
    input: &LayerInput<'_>,
    opts: &StepOptions,
    dy: &Mat,
) -> LayerOutput {
    let mut bld = Builder::new(cfg, params, *opts);
    let x = bld.t.leaf(input.x.clone());
    let (y, enc) = match kind {
        LayerKind::Encoder(i) => {
            let vis = Visible::Prefix(input.lens.to_vec());
            (bld.encoder_layer(x, i, input.batch, input.len, &vis), None)
        }
        LayerKind::Decoder(j) => {
            let enc = bld.t.leaf(
                input
                    .enc
                    .expect("decoder layer needs the encoder output")
                    .clone(),
            );
            let self_vis = Visible::CausalPrefix(input.lens.to_vec());
            let src_vis = Visible::Prefix(input.src_lens.to_vec());
            let y = bld.decoder_layer(
                x,
                j,
                enc,
                input.batch,
                (input.len, input.src_len),
                &self_vis,
                &src_vis,
            );
            (y, Some(enc))
        }
    };
    let g = bld.t.backward(y, dy.clone());
    let zeros = |m: &Mat| Mat::zeros(m.rows, m.cols);
    LayerOutput {
        y: bld.t.value(y).clone(),
        dx: g[x].clone().unwrap_or_else(|| zeros(input.x)),
        d_enc: enc.map(|e| g[e].clone().unwrap_or_else(|| zeros(bld.t.value(e)))),
        grads: bld.grads(&g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memplan::Arena;
    use crate::model::Transformer;

    #[test]
    fn matches_fused_model_in_f64() {
        let mut cfg = ModelConfig::tiny(2, 2, 4, 9, 6);
        cfg.tie_embeddings = false;
        let m = Transformer::new(cfg.clone()).unwrap();
        let p = m.init_params::<f64>(2);
        let b = Batch::from_pairs(
            &[
                (vec![2, 3, 4], vec![4, 3, 2, 5]),
                (vec![5, 6, 7, 8, 2], vec![8, 7]),
            ],
            0,
            1,
        )
        .unwrap();
        let opts = StepOptions {
            p_drop: 0.1,
            alpha: 0.1,
            seed: 4,
            step: 2,
            loss_scale: 2.0,
            ..Default::default()
        };
        let r = reference_forward_backward(&cfg, &p, &b, &opts, true).unwrap();
        let mut g = FlatParams::zeros(m.layout().clone());
        let f = m
            .forward_backward(&p, &b, &opts, &mut Arena::heap(), &mut g)
            .unwrap();
        assert!((r.loss - f.loss).abs() < 1e-10, "{} vs {}", r.loss, f.loss);
        assert_eq!(r.tokens, f.tokens);
        let rg = r.grads.unwrap();
        for (a, b) in rg.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn layers_match_fused_layers_in_f64() {
        let cfg = ModelConfig::tiny(2, 2, 4, 9, 6);
        let m = Transformer::new(cfg.clone()).unwrap();
        let p = m.init_params::<f64>(3);
        let r = crate::numerics::CounterRng::new(8);
        let rand = |k: u64, n: usize| -> Vec<f64> {
            let s = r.fork(k).seed;
            (0..n)
                .map(|i| 2.0 * crate::numerics::rand_uniform(s, i as u64) - 1.0)
                .collect()
        };
        let (x, dy, enc) = (rand(0, 24), rand(1, 24), rand(2, 32));
        let opts = StepOptions {
            p_drop: 0.2,
            seed: 9,
            step: 3,
            ..Default::default()
        };
        for kind in [
            LayerKind::Encoder(1),
            LayerKind::Decoder(0),
            LayerKind::Decoder(1),
        ] {
            let pass = crate::model::LayerPass {
                x: &x,
                batch: 2,
                len: 3,
                lens: &[3, 2],
                enc: Some(&enc),
                src_len: 4,
                src_lens: &[4, 3],
                dy: Some(&dy),
            };
            let mut g = FlatParams::zeros(m.layout().clone());
            let f = m
                .layer_forward_backward(&p, kind, &pass, &opts, &mut Arena::heap(), &mut g)
                .unwrap();
            let (xm, em, dym) = (
                Mat::new(6, 4, x.clone()),
                Mat::new(8, 4, enc.clone()),
                Mat::new(6, 4, dy.clone()),
            );
            let input = LayerInput {
                x: &xm,
                batch: 2,
                len: 3,
                lens: &[3, 2],
                enc: Some(&em),
                src_len: 4,
                src_lens: &[4, 3],
            };
            let o = reference_layer(&cfg, &p, kind, &input, &opts, &dym);
            let close = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .all(|(a, b)| (a - b).abs() < 1e-10 * (1.0 + a.abs()))
            };
            assert!(close(&o.y.data, &f.y), "{kind:?} y");
            assert!(close(&o.dx.data, &f.dx), "{kind:?} dx");
            assert!(close(o.grads.data(), g.data()), "{kind:?} grads");
            if let Some(de) = o.d_enc {
                assert!(close(&de.data, f.d_enc.as_ref().unwrap()), "{kind:?} d_enc");
            }
        }
    }
}
