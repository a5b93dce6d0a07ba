//! Straightforward multi-pass compositions of the fused kernels.
//!
//! Each helper materialises every intermediate tensor, one pass per
//! primitive, the way a framework would chain fine-grained operators. They
//! exist as the baseline for benchmarks and share no code with the fused
//! kernels beyond the mask type.

use crate::error::Result;
use crate::kernels::dropout::{BitMask, DropoutMask};
use crate::kernels::gemm::{gemm_into, GemmDims};
use crate::model::FlatParams;
use crate::numerics::Real;

fn add_bias<T: Real>(x: &[T], bias: &[T]) -> Vec<T> {
    let w = bias.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| v + bias[i % w])
        .collect()
}

fn dropout<T: Real>(x: &[T], mask: &DropoutMask) -> Vec<T> {
    let keep: Vec<T> = (0..x.len())
        .map(|i| if mask.kept(i) { T::one() } else { T::zero() })
        .collect();
    let masked: Vec<T> = x.iter().zip(&keep).map(|(&a, &k)| a * k).collect();
    let s = T::from_f64(mask.scale());
    masked.iter().map(|&v| v * s).collect()
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn bias_dropout_residual<T: Real>(
    x: &[T],
    bias: &[T],
    residual: &[T],
    mask: &DropoutMask,
) -> Vec<T> {
    let biased = add_bias(x, bias);
    let dropped = dropout(&biased, mask);
    add(&dropped, residual)
}

pub fn bias_relu_dropout<T: Real>(x: &[T], bias: &[T], mask: &DropoutMask) -> (Vec<T>, BitMask) {
    let biased = add_bias(x, bias);
    let relu_mask = BitMask::from_fn(biased.len(), |i| biased[i] > T::zero());
    let act: Vec<T> = biased
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    (dropout(&act, mask), relu_mask)
}

/// Two-pass LayerNorm: mean, centred copy, variance, normalise, affine.
pub fn layernorm<T: Real>(x: &[T], m: usize, w: &[T], b: &[T], eps: f64) -> Vec<T> {
    let rows = x.len() / m;
    let inv_m = T::one() / T::from_usize(m);
    let means: Vec<T> = (0..rows)
        .map(|r| x[r * m..(r + 1) * m].iter().copied().sum::<T>() * inv_m)
        .collect();
    let centred: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v - means[i / m])
        .collect();
    let sq: Vec<T> = centred.iter().map(|&v| v * v).collect();
    let sd: Vec<T> = (0..rows)
        .map(|r| {
            (sq[r * m..(r + 1) * m].iter().copied().sum::<T>() * inv_m + T::from_f64(eps)).sqrt()
        })
        .collect();
    let normed: Vec<T> = centred
        .iter()
        .enumerate()
        .map(|(i, &v)| v / sd[i / m])
        .collect();
    let scaled: Vec<T> = normed
        .iter()
        .enumerate()
        .map(|(i, &v)| v * w[i % m])
        .collect();
    add_bias(&scaled, b)
}

/// Softmax as max, subtract, exp, sum, divide passes over the whole tensor.
pub fn softmax<T: Real>(x: &[T], cols: usize, limits: &[usize]) -> Vec<T> {
    let rows = x.len() / cols;
    let maxes: Vec<T> = (0..rows)
        .map(|r| {
            x[r * cols..r * cols + limits[r]]
                .iter()
                .copied()
                .fold(T::neg_infinity(), T::max)
        })
        .collect();
    let shifted: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v - maxes[i / cols])
        .collect();
    let exps: Vec<T> = shifted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i % cols < limits[i / cols] {
                v.exp()
            } else {
                T::zero()
            }
        })
        .collect();
    let sums: Vec<T> = (0..rows)
        .map(|r| exps[r * cols..(r + 1) * cols].iter().copied().sum())
        .collect();
    exps.iter()
        .enumerate()
        .map(|(i, &v)| v / sums[i / cols])
        .collect()
}

/// Softmax, then log, then smoothed cross-entropy, then the gradient from
/// the materialised probabilities. Returns `(loss, dlogits)`.
pub fn criterion<T: Real>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    alpha: f64,
) -> (f64, Vec<T>) {
    let limits = vec![vocab; targets.len()];
    let q = softmax(logits, vocab, &limits);
    let logq: Vec<T> = q.iter().map(|&v| v.ln()).collect();
    let a = T::from_f64(alpha);
    let v = T::from_usize(vocab);
    let p: Vec<T> = (0..logits.len())
        .map(|i| {
            let hot = if i % vocab == targets[i / vocab] {
                T::one()
            } else {
                T::zero()
            };
            (T::one() - a) * hot + a / v
        })
        .collect();
    let loss: f64 = p
        .iter()
        .zip(&logq)
        .map(|(&pi, &l)| -(pi * l).to_f64())
        .sum();
    let grad = q.iter().zip(&p).map(|(&qi, &pi)| qi - pi).collect();
    (loss, grad)
}

/// `x · Wᵀ` for `x` of `rows x k` and `W` of `n x k`.
fn linear<T: Real>(x: &[T], w: &[T], n: usize) -> Vec<T> {
    let k = w.len() / n;
    let m = x.len() / k;
    let mut out = vec![T::zero(); m * n];
    gemm_into(GemmDims { m, n, k }, x, false, w, true, &mut out, false);
    out
}

/// Pre-LN encoder layer `enc.{layer}` as a chain of separate passes:
/// per-head attention with explicit gathers, then the FFN. `masks` are the
/// attention-output, FFN-activation and FFN-output dropout masks.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<T: Real>(
    params: &FlatParams<T>,
    layer: usize,
    x: &[T],
    batch: usize,
    len: usize,
    lens: &[usize],
    heads: usize,
    eps: f64,
    masks: &[DropoutMask; 3],
) -> Result<Vec<T>> {
    let p = |name: &str| params.by_name(&format!("enc.{layer}.{name}"));
    let rows = batch * len;
    let d = x.len() / rows;
    let dh = d / heads;
    let u = layernorm(x, d, p("ln1.w")?, p("ln1.b")?, eps);
    let qkv = add_bias(&linear(&u, p("attn.qkv.w")?, 3 * d), p("attn.qkv.b")?);
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut ctx = vec![T::zero(); rows * d];
    for b in 0..batch {
        for h in 0..heads {
            let gather = |part: usize| -> Vec<T> {
                (0..len)
                    .flat_map(|t| {
                        let s = (b * len + t) * 3 * d + part * d + h * dh;
                        qkv[s..s + dh].to_vec()
                    })
                    .collect()
            };
            let (q, k, v) = (gather(0), gather(1), gather(2));
            let mut scores = vec![T::zero(); len * len];
            gemm_into(
                GemmDims {
                    m: len,
                    n: len,
                    k: dh,
                },
                &q,
                false,
                &k,
                true,
                &mut scores,
                false,
            );
            let scores: Vec<T> = scores.iter().map(|&s| s * scale).collect();
            let probs = softmax(&scores, len, &vec![lens[b]; len]);
            let mut c = vec![T::zero(); len * dh];
            gemm_into(
                GemmDims {
                    m: len,
                    n: dh,
                    k: len,
                },
                &probs,
                false,
                &v,
                false,
                &mut c,
                false,
            );
            for t in 0..len {
                let o = (b * len + t) * d + h * dh;
                ctx[o..o + dh].copy_from_slice(&c[t * dh..(t + 1) * dh]);
            }
        }
    }
    let o = linear(&ctx, p("attn.out.w")?, d);
    let x1 = bias_dropout_residual(&o, p("attn.out.b")?, x, &masks[0]);
    let u2 = layernorm(&x1, d, p("ln2.w")?, p("ln2.b")?, eps);
    let b1 = p("ffn.b1")?;
    let h = linear(&u2, p("ffn.w1")?, b1.len());
    let (a, _) = bias_relu_dropout(&h, b1, &masks[1]);
    let o2 = linear(&a, p("ffn.w2")?, d);
    Ok(bias_dropout_residual(&o2, p("ffn.b2")?, &x1, &masks[2]))
}
