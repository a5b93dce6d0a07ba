//! Finite-difference checks of every fused backward pass and of the whole
//! model against the binary64 reference.
//!
//! For an op `y = f(inputs)` and a random upstream gradient `c`, the fused
//! backward applied to `c` must match central differences of `Σ c·y`, with
//! `y` computed by the reference primitives.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradients::{
    bias_dropout_residual_backward, bias_relu_dropout_backward, embedding_backward,
    layernorm_backward, ls_cross_entropy_backward, softmax_backward,
};
use crate::kernels::criterion::fused_criterion_in_place;
use crate::kernels::dropout::DropoutMask;
use crate::kernels::elementwise::bias_relu_dropout_with_mask;
use crate::kernels::embedding::EmbeddingConfig;
use crate::kernels::layernorm::layernorm_forward;
use crate::kernels::softmax::{softmax_forward, AttentionMask};
use crate::memplan::Arena;
use crate::model::{
    pack_cross_weights, packed_kv_backward, Batch, FlatParams, ModelConfig, StepOptions,
    Transformer,
};
use crate::numerics::{CounterRng, Tensor};
use crate::oracle::ops::{self, Mat};
use crate::oracle::{fd_grad, max_rel_err, reference_forward_backward, FdConfig};

/// Ops covered by [`run_op_suite`], in report order.
pub const OPS: [&str; 8] = [
    "embedding_backward",
    "ls_cross_entropy_backward",
    "fused_criterion",
    "softmax_backward",
    "layernorm_backward",
    "bias_dropout_residual_backward",
    "bias_relu_dropout_backward",
    "packed_kv_backward",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Draws for instance generation.
struct Gen {
    rng: CounterRng,
    i: u64,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Self {
            rng: CounterRng::new(seed),
            i: 0,
        }
    }

    fn next(&mut self) -> f64 {
        self.i += 1;
        self.rng.uniform(self.i)
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.i += 1;
        lo + self.rng.below(self.i, (hi - lo + 1) as u64) as usize
    }

    fn vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| (2.0 * self.next() - 1.0) * scale).collect()
    }

    fn seed(&mut self) -> u64 {
        self.i += 1;
        self.rng.bits(self.i)
    }

    fn prob(&mut self) -> f64 {
        if self.next() < 0.5 {
            0.0
        } else {
            0.1 + 0.4 * self.next()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn factors(mask: &DropoutMask) -> Vec<f64> {
    (0..mask.len())
        .map(|i| if mask.kept(i) { mask.scale() } else { 0.0 })
        .collect()
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// One instance: `(analytic, finite-difference, compare-mask)`.
type Instance = (Vec<f64>, Vec<f64>, Vec<bool>);

fn embedding_instance(g: &mut Gen, fd: &FdConfig) -> Result<Instance> {
    let (vocab, d, batch, len) = (g.range(2, 16), g.range(1, 16), g.range(1, 4), g.range(1, 8));
    let max_len = len + g.range(0, 3);
    let scale = 0.5 + 2.0 * g.next() as f32;
    let cfg = EmbeddingConfig {
        scale,
        vocab,
        max_len,
        learned_positional: true,
    };
    let tokens: Vec<usize> = (0..batch * len).map(|_| g.range(0, vocab - 1)).collect();
    let mask = DropoutMask::generate(g.seed(), g.prob(), batch * len * d)?;
    let c = g.vec(batch * len * d, 1.0);
    let (table, pos) = (g.vec(vocab * d, 1.0), g.vec(max_len * d, 1.0));
    let (de, dp) = embedding_backward(
        &Tensor::new(&[batch, len, d], c.clone())?,
        &tokens,
        &mask,
        &cfg,
    )?;
    let analytic = concat(&[de.data(), dp.unwrap().data()]);
    let f = factors(&mask);
    let nt = vocab * d;
    let num = fd_grad(
        |x| {
            let t = Mat::new(vocab, d, x[..nt].to_vec());
            let p = Mat::new(max_len, d, x[nt..].to_vec());
            dot(
                &c,
                &ops::embedding(&t, &p, &tokens, len, scale as f64, &f).data,
            )
        },
        &concat(&[&table, &pos]),
        fd,
    );
    let n = analytic.len();
    Ok((analytic, num, vec![true; n]))
}

fn criterion_instance(g: &mut Gen, fd: &FdConfig, fused: bool) -> Result<Instance> {
    let (rows, vocab) = (g.range(1, 16), g.range(2, 16));
    let alpha = if g.next() < 0.3 { 0.0 } else { g.next() };
    let pad = vocab - 1;
    let targets: Vec<usize> = (0..rows).map(|_| g.range(0, vocab - 1)).collect();
    let h = g.vec(rows * vocab, 3.0);
    let analytic = if fused {
        let mut buf = h.clone();
        fused_criterion_in_place(&mut buf, vocab, &targets, alpha, Some(pad), 1.0)?;
        buf
    } else {
        let (q, _) = softmax_forward(
            &Tensor::new(&[rows, vocab], h.clone())?,
            &AttentionMask::None,
        )?;
        ls_cross_entropy_backward(&q, &targets, alpha, Some(pad))?.into_data()
    };
    // Row r's logits only reach row r's loss, so each row is differenced on
    // its own; summing all rows would add their rounding noise to every
    // quotient.
    let num: Vec<f64> = (0..rows)
        .flat_map(|r| {
            fd_grad(
                |x| {
                    ops::criterion(
                        &Mat::new(1, vocab, x.to_vec()),
                        &targets[r..=r],
                        alpha,
                        Some(pad),
                    )
                    .0
                },
                &h[r * vocab..(r + 1) * vocab],
                fd,
            )
        })
        .collect();
    let n = analytic.len();
    Ok((analytic, num, vec![true; n]))
}

fn softmax_instance(g: &mut Gen, fd: &FdConfig) -> Result<Instance> {
    let (batch, lq, lk) = (g.range(1, 4), g.range(1, 16), g.range(1, 16));
    let lens: Vec<usize> = (0..batch).map(|_| g.range(1, lk)).collect();
    let causal = g.next() < 0.5;
    let mask = if causal {
        AttentionMask::CausalPadding(lens.clone())
    } else {
        AttentionMask::Padding(lens.clone())
    };
    let limits: Vec<usize> = (0..batch * lq)
        .map(|r| {
            if causal {
                lens[r / lq].min(r % lq + 1)
            } else {
                lens[r / lq]
            }
        })
        .collect();
    let x = g.vec(batch * lq * lk, 4.0);
    let c = g.vec(x.len(), 1.0);
    let (_, cache) = softmax_forward(&Tensor::new(&[batch, lq, lk], x.clone())?, &mask)?;
    let analytic =
        softmax_backward(&Tensor::new(&[batch, lq, lk], c.clone())?, &cache)?.into_data();
    let num = fd_grad(
        |v| {
            dot(
                &c,
                &ops::softmax(&Mat::new(batch * lq, lk, v.to_vec()), &limits).data,
            )
        },
        &x,
        fd,
    );
    let n = analytic.len();
    Ok((analytic, num, vec![true; n]))
}

fn layernorm_instance(g: &mut Gen, fd: &FdConfig) -> Result<Instance> {
    let (rows, m) = (g.range(1, 16), g.range(2, 16));
    let shift = g.vec(1, 5.0)[0];
    let x: Vec<f64> = g
        .vec(rows * m, 2.0)
        .into_iter()
        .map(|v| v + shift)
        .collect();
    let (w, b, c) = (g.vec(m, 1.5), g.vec(m, 1.0), g.vec(rows * m, 1.0));
    let eps = 1e-5;
    let xt = Tensor::new(&[rows, m], x.clone())?;
    let (_, cache) = layernorm_forward(&xt, &w, &b, eps)?;
    let (dx, dw, db) = layernorm_backward(&Tensor::new(&[rows, m], c.clone())?, &xt, &w, &cache)?;
    let analytic = concat(&[dx.data(), &dw, &db]);
    let nx = rows * m;
    let num = fd_grad(
        |v| {
            let y = ops::layernorm(
                &Mat::new(rows, m, v[..nx].to_vec()),
                &v[nx..nx + m],
                &v[nx + m..],
                eps,
            )
            .y;
            dot(&c, &y.data)
        },
        &concat(&[&x, &w, &b]),
        fd,
    );
    let n = analytic.len();
    Ok((analytic, num, vec![true; n]))
}

fn bdr_instance(g: &mut Gen, fd: &FdConfig) -> Result<Instance> {
    let (rows, w) = (g.range(1, 16), g.range(1, 16));
    let n = rows * w;
    let mask = DropoutMask::generate(g.seed(), g.prob(), n)?;
    let (x, b, r, c) = (g.vec(n, 1.0), g.vec(w, 1.0), g.vec(n, 1.0), g.vec(n, 1.0));
    let (dx, db, dr) = bias_dropout_residual_backward(&Tensor::new(&[rows, w], c.clone())?, &mask)?;
    let analytic = concat(&[dx.data(), &db, dr.data()]);
    let f = factors(&mask);
    let num = fd_grad(
        |v| {
            let y = ops::bias_dropout_residual(
                &Mat::new(rows, w, v[..n].to_vec()),
                &v[n..n + w],
                &Mat::new(rows, w, v[n + w..].to_vec()),
                &f,
            );
            dot(&c, &y.data)
        },
        &concat(&[&x, &b, &r]),
        fd,
    );
    let len = analytic.len();
    Ok((analytic, num, vec![true; len]))
}

fn brd_instance(g: &mut Gen, fd: &FdConfig) -> Result<Instance> {
    let (rows, w) = (g.range(1, 16), g.range(1, 16));
    let n = rows * w;
    let mask = DropoutMask::generate(g.seed(), g.prob(), n)?;
    let (x, b, c) = (g.vec(n, 1.0), g.vec(w, 0.5), g.vec(n, 1.0));
    let (_, relu) = bias_relu_dropout_with_mask(&Tensor::new(&[rows, w], x.clone())?, &b, &mask)?;
    let (dx, db) = bias_relu_dropout_backward(&Tensor::new(&[rows, w], c.clone())?, &mask, &relu)?;
    let analytic = concat(&[dx.data(), &db]);
    let f = factors(&mask);
    let num = fd_grad(
        |v| {
            dot(
                &c,
                &ops::bias_relu_dropout(&Mat::new(rows, w, v[..n].to_vec()), &v[n..], &f).data,
            )
        },
        &concat(&[&x, &b]),
        fd,
    );
    // Skip elements near the ReLU kink, and bias columns containing one.
    let near: Vec<bool> = (0..n)
        .map(|i| (x[i] + b[i % w]).abs() < fd.kink_exclusion_radius)
        .collect();
    let mut include: Vec<bool> = near.iter().map(|&k| !k).collect();
    include.extend((0..w).map(|col| (0..rows).all(|r| !near[r * w + col])));
    Ok((analytic, num, include))
}

fn packed_kv_instance(g: &mut Gen, fd: &FdConfig) -> Result<Instance> {
    let (layers, d, rows) = (g.range(1, 3), g.range(1, 8), g.range(1, 16));
    let x = g.vec(rows * d, 1.0);
    let mk = |g: &mut Gen| -> Result<Vec<Tensor<f64>>> {
        (0..layers)
            .map(|_| Tensor::new(&[d, d], g.vec(d * d, 0.7)))
            .collect()
    };
    let (wk, wv) = (mk(g)?, mk(g)?);
    let bk: Vec<Vec<f64>> = (0..layers).map(|_| g.vec(d, 0.5)).collect();
    let bv: Vec<Vec<f64>> = (0..layers).map(|_| g.vec(d, 0.5)).collect();
    let pw = pack_cross_weights(&wk, &wv, &bk, &bv)?;
    let ck: Vec<Vec<f64>> = (0..layers).map(|_| g.vec(rows * d, 1.0)).collect();
    let cv: Vec<Vec<f64>> = (0..layers).map(|_| g.vec(rows * d, 1.0)).collect();
    let grads = (0..layers)
        .map(|i| {
            Ok(Some((
                Tensor::new(&[1, rows, d], ck[i].clone())?,
                Tensor::new(&[1, rows, d], cv[i].clone())?,
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    let (dx, dw, db) = packed_kv_backward(&grads, &Tensor::new(&[1, rows, d], x.clone())?, &pw)?;
    let analytic = concat(&[dx.data(), &dw, &db]);
    // Per-layer projections: layer i's keys use weight rows [i d, (i+1) d)
    // of the packed matrix, its values rows [(n+i) d, (n+i+1) d).
    let nx = rows * d;
    let nw = 2 * layers * d * d;
    let num = fd_grad(
        |v| {
            let xm = Mat::new(rows, d, v[..nx].to_vec());
            let mut total = 0.0;
            for i in 0..layers {
                for (row0, c) in [(i * d, &ck[i]), ((layers + i) * d, &cv[i])] {
                    let w = Mat::new(d, d, v[nx + row0 * d..nx + (row0 + d) * d].to_vec());
                    let b = &v[nx + nw + row0..nx + nw + row0 + d];
                    let y = ops::matmul(&xm, false, &w, true);
                    total += (0..y.data.len())
                        .map(|k| c[k] * (y.data[k] + b[k % d]))
                        .sum::<f64>();
                }
            }
            total
        },
        &concat(&[&x, &pw.w, &pw.b]),
        fd,
    );
    let n = analytic.len();
    Ok((analytic, num, vec![true; n]))
}

/// Runs `instances` random cases of every op. If `fault` names an op, that
/// op's analytic gradient is negated before comparison.
pub fn run_op_suite(
    instances: usize,
    seed: u64,
    fd: &FdConfig,
    fault: Option<&str>,
) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (k, &op) in OPS.iter().enumerate() {
        let mut g = Gen::new(CounterRng::new(seed).fork(k as u64).seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (mut a, n, include) = match op {
                "embedding_backward" => embedding_instance(&mut g, fd)?,
                "ls_cross_entropy_backward" => criterion_instance(&mut g, fd, false)?,
                "fused_criterion" => criterion_instance(&mut g, fd, true)?,
                "softmax_backward" => softmax_instance(&mut g, fd)?,
                "layernorm_backward" => layernorm_instance(&mut g, fd)?,
                "bias_dropout_residual_backward" => bdr_instance(&mut g, fd)?,
                "bias_relu_dropout_backward" => brd_instance(&mut g, fd)?,
                "packed_kv_backward" => packed_kv_instance(&mut g, fd)?,
                _ => unreachable!(),
            };
            if fault == Some(op) {
                a.iter_mut().for_each(|v| *v = -*v);
            }
            worst = worst.max(max_rel_err(&a, &n, |i| include[i]));
        }
        out.push(OpReport {
            op: op.to_string(),
            instances,
            max_rel_err: worst,
            tolerance: fd.tolerance_rel,
            pass: worst <= fd.tolerance_rel,
        });
    }
    Ok(out)
}

/// Small model used by the whole-model check.
pub fn default_check_config() -> ModelConfig {
    ModelConfig::tiny(2, 2, 4, 8, 6)
}

/// Fused binary64 gradients of the whole model against central differences
/// of the reference loss, with dropout and label smoothing on.
pub fn run_model_check(
    cfg: &ModelConfig,
    seed: u64,
    fd: &FdConfig,
    tolerance: f64,
) -> Result<OpReport> {
    let model = Transformer::new(cfg.clone())?;
    let params = model.init_params::<f64>(seed);
    let mut g = Gen::new(seed ^ 0x5EED);
    let (lo, hi) = (2, cfg.vocab - 1);
    let max = cfg.max_len.min(5);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..2)
        .map(|_| {
            let a = g.range(1, max);
            let b = g.range(1, max);
            (
                (0..a).map(|_| g.range(lo, hi)).collect(),
                (0..b).map(|_| g.range(lo, hi)).collect(),
            )
        })
        .collect();
    let batch = Batch::from_pairs(&pairs, 0, 1)?;
    let opts = StepOptions {
        p_drop: 0.1,
        alpha: 0.1,
        seed,
        step: 1,
        ..Default::default()
    };
    let mut grads = FlatParams::zeros(model.layout().clone());
    model.forward_backward(&params, &batch, &opts, &mut Arena::heap(), &mut grads)?;
    let layout = model.layout().clone();
    let num = fd_grad(
        |x| {
            let p = FlatParams::from_vec(layout.clone(), x.to_vec()).expect("layout length");
            reference_forward_backward(cfg, &p, &batch, &opts, false)
                .expect("reference loss")
                .loss
        },
        params.data(),
        fd,
    );
    let err = max_rel_err(grads.data(), &num, |_| true);
    Ok(OpReport {
        op: "model".into(),
        instances: 1,
        max_rel_err: err,
        tolerance,
        pass: err <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_and_fault_is_caught() {
        let fd = FdConfig::default();
        let reports = run_op_suite(5, 1, &fd, None).unwrap();
        assert!(reports.iter().all(|r| r.pass), "{reports:?}");
        let reports = run_op_suite(2, 1, &fd, Some("layernorm_backward")).unwrap();
        let failed: Vec<&str> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.op.as_str())
            .collect();
        assert_eq!(failed, vec!["layernorm_backward"]);
    }

    #[test]
    fn model_passes() {
        let r = run_model_check(&default_check_config(), 3, &FdConfig::default(), 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
