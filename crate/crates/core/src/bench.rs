//! Fused-versus-unfused timing harness.
//!
//! Each entry times the fused kernel and its multi-pass composition from
//! [`kernels::unfused`](crate::kernels::unfused) on the same inputs, after
//! discarding warm-up runs. Every timed fused output is compared against
//! the unfused one, so a fast but wrong kernel shows up as a parity failure.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::criterion::fused_criterion_in_place;
use crate::kernels::dropout::{BitMask, DropoutMask};
use crate::kernels::elementwise::{bias_dropout_residual_into, bias_relu_dropout_into};
use crate::kernels::layernorm::layernorm_forward_into;
use crate::kernels::softmax::{
    select_softmax_strategy, softmax_rows_into, AttentionMask, RowLayout,
};
use crate::kernels::unfused;
use crate::memplan::Arena;
use crate::model::{
    dropout_site_seed, LayerKind, LayerPass, ModelConfig, NullSink, StepOptions, Transformer,
};
use crate::numerics::{rand_uniform, CounterRng};
use crate::par;

/// Parity bound between fused and unfused outputs, relative to
/// `max(1, |unfused|)`.
pub const PARITY_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub p_drop: f64,
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            len: 64,
            d_model: 256,
            heads: 4,
            d_ff: 1024,
            vocab: 4096,
            p_drop: 0.1,
            warmup: 3,
            runs: 10,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub op: String,
    pub threads: usize,
    pub elements: usize,
    pub fused: Timing,
    pub unfused: Timing,
    /// Unfused mean over fused mean.
    pub speedup: f64,
    pub max_rel_diff: f64,
    pub parity: bool,
}

/// Runs `f` `warmup` times untimed, then `runs` times timed.
pub fn time_runs<F: FnMut()>(warmup: usize, runs: usize, mut f: F) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let ms: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / ms.len() as f64;
    Timing {
        mean_ms: mean,
        stddev_ms: var.sqrt(),
    }
}

pub fn max_rel_diff(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            if x.is_nan() || y.is_nan() {
                f64::INFINITY
            } else {
                (x - y).abs() / y.abs().max(1.0)
            }
        })
        .fold(0.0, f64::max)
}

fn random(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n)
        .map(|i| (lo + (hi - lo) * rand_uniform(seed, i as u64)) as f32)
        .collect()
}

/// Times one op pair. `fused` writes into the given buffer; `unfused`
/// returns a fresh vector.
fn entry(
    cfg: &BenchConfig,
    op: &str,
    elements: usize,
    mut fused: impl FnMut(&mut Vec<f32>),
    mut unfused: impl FnMut() -> Vec<f32>,
) -> BenchEntry {
    let reference = unfused();
    let mut out = vec![0.0f32; reference.len()];
    let mut worst = 0.0f64;
    let fused_t = time_runs(cfg.warmup, cfg.runs, || {
        fused(&mut out);
        worst = worst.max(max_rel_diff(&out, &reference));
    });
    let unfused_t = time_runs(cfg.warmup, cfg.runs, || {
        std::hint::black_box(unfused());
    });
    BenchEntry {
        op: op.to_string(),
        threads: par::threads(),
        elements,
        fused: fused_t,
        unfused: unfused_t,
        speedup: unfused_t.mean_ms / fused_t.mean_ms.max(1e-12),
        max_rel_diff: worst,
        parity: worst <= PARITY_TOLERANCE,
    }
}

/// One entry per fused op plus a full encoder layer, on the current pool.
pub fn run_benchmarks(cfg: &BenchConfig) -> Result<Vec<BenchEntry>> {
    let rng = CounterRng::new(cfg.seed);
    let s = |k: u64| rng.fork(k).seed;
    let (b, l, d, f, n, v) = (
        cfg.batch,
        cfg.len,
        cfg.d_model,
        cfg.d_ff,
        cfg.heads,
        cfg.vocab,
    );
    let rows = b * l;
    let lens: Vec<usize> = (0..b).map(|i| l - (i * l / (2 * b.max(1)))).collect();
    let mut out = Vec::new();

    let x = random(s(0), rows * d, -2.0, 2.0);
    let w = random(s(1), d, 0.5, 1.5);
    let bias = random(s(2), d, -0.5, 0.5);
    let eps = 1e-5;
    let (mut mu, mut sigma) = (vec![0.0f32; rows], vec![0.0f32; rows]);
    out.push(entry(
        cfg,
        "layernorm",
        rows * d,
        |y| {
            layernorm_forward_into(&x, d, &w, &bias, eps, y, &mut mu, &mut sigma)
                .expect("layernorm shapes")
        },
        || unfused::layernorm(&x, d, &w, &bias, eps),
    ));

    let scores = random(s(3), b * n * l * l, -4.0, 4.0);
    let layout = RowLayout {
        batch: b,
        rows_per_batch: n * l,
        queries: l,
        cols: l,
    };
    let mask = AttentionMask::Padding(lens.clone());
    let limits: Vec<usize> = (0..layout.rows()).map(|r| mask.limit(&layout, r)).collect();
    let strategy = select_softmax_strategy(layout.rows(), l, false);
    out.push(entry(
        cfg,
        "softmax",
        scores.len(),
        |y| softmax_rows_into(&scores, layout, &mask, strategy, y).expect("softmax shapes"),
        || unfused::softmax(&scores, l, &limits),
    ));

    let residual = random(s(4), rows * d, -1.0, 1.0);
    let drop_d = DropoutMask::generate(s(5), cfg.p_drop, rows * d)?;
    out.push(entry(
        cfg,
        "bias_dropout_residual",
        rows * d,
        |y| bias_dropout_residual_into(&x, &bias, &residual, &drop_d, y),
        || unfused::bias_dropout_residual(&x, &bias, &residual, &drop_d),
    ));

    let h = random(s(6), rows * f, -2.0, 2.0);
    let bias_f = random(s(7), f, -0.5, 0.5);
    let drop_f = DropoutMask::generate(s(8), cfg.p_drop, rows * f)?;
    let mut relu = BitMask::zeros(rows * f);
    out.push(entry(
        cfg,
        "bias_relu_dropout",
        rows * f,
        |y| bias_relu_dropout_into(&h, &bias_f, &drop_f, y, &mut relu),
        || unfused::bias_relu_dropout(&h, &bias_f, &drop_f).0,
    ));

    let logits = random(s(9), rows * v, -3.0, 3.0);
    let targets: Vec<usize> = (0..rows)
        .map(|i| (rand_uniform(s(10), i as u64) * v as f64) as usize % v)
        .collect();
    out.push(entry(
        cfg,
        "criterion",
        rows * v,
        |y| {
            y.copy_from_slice(&logits);
            fused_criterion_in_place(y, v, &targets, 0.1, None, 1.0).expect("criterion shapes");
        },
        || unfused::criterion(&logits, v, &targets, 0.1).1,
    ));

    let mut mc = ModelConfig::tiny(1, 1, d, 8, l);
    mc.n_heads = n;
    mc.d_ff = f;
    let model = Transformer::new(mc.clone())?;
    let params = model.init_params::<f32>(cfg.seed);
    let opts = StepOptions {
        p_drop: cfg.p_drop,
        seed: cfg.seed,
        ..Default::default()
    };
    let masks: [DropoutMask; 3] = [
        DropoutMask::generate(dropout_site_seed(&opts, 100), cfg.p_drop, rows * d)?,
        DropoutMask::generate(dropout_site_seed(&opts, 101), cfg.p_drop, rows * f)?,
        DropoutMask::generate(dropout_site_seed(&opts, 102), cfg.p_drop, rows * d)?,
    ];
    let layer_x = random(s(11), rows * d, -1.0, 1.0);
    let pass = LayerPass {
        x: &layer_x,
        batch: b,
        len: l,
        lens: &lens,
        enc: None,
        src_len: 0,
        src_lens: &[],
        dy: None,
    };
    let mut arena = Arena::heap();
    out.push(entry(
        cfg,
        "encoder_layer",
        rows * d,
        |y| {
            let r = model
                .layer_forward_backward(
                    &params,
                    LayerKind::Encoder(0),
                    &pass,
                    &opts,
                    &mut arena,
                    &mut NullSink,
                )
                .expect("layer shapes");
            *y = r.y;
        },
        || {
            unfused::encoder_layer(&params, 0, &layer_x, b, l, &lens, n, mc.ln_eps, &masks)
                .expect("layer params")
        },
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_has_parity_everywhere() {
        let cfg = BenchConfig {
            batch: 2,
            len: 8,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            vocab: 40,
            warmup: 1,
            runs: 2,
            ..Default::default()
        };
        let r = run_benchmarks(&cfg).unwrap();
        let ops: Vec<&str> = r.iter().map(|e| e.op.as_str()).collect();
        assert_eq!(
            ops,
            [
                "layernorm",
                "softmax",
                "bias_dropout_residual",
                "bias_relu_dropout",
                "criterion",
                "encoder_layer"
            ]
        );
        for e in &r {
            assert!(e.parity, "{} differs by {}", e.op, e.max_rel_diff);
            assert!(e.fused.mean_ms >= 0.0 && e.speedup.is_finite());
        }
    }

    #[test]
    fn timing_statistics() {
        let t = time_runs(0, 4, || {});
        assert!(t.mean_ms >= 0.0 && t.stddev_ms >= 0.0);
        assert_eq!(max_rel_diff(&[1.0, 3.0], &[1.0, 2.0]), 0.5);
        assert_eq!(max_rel_diff(&[f32::NAN], &[0.0]), f64::INFINITY);
    }
}
