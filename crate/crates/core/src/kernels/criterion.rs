//! Label-smoothed cross-entropy.
//!
//! With smoothing `alpha` over `V` classes the target distribution is
//! `p = (1 - alpha) * onehot(k) + alpha / V`, and the per-token loss is
//! `-Σ p_i log q_i`. Losses are summed over non-pad tokens.

use crate::error::{Error, Result};
use crate::numerics::reduce::pairwise_sum;
use crate::numerics::{Real, Tensor};
use crate::par;

use super::softmax::log_softmax_row_in_place;

pub(crate) fn check_targets(targets: &[usize], vocab: usize, pad_id: Option<usize>) -> Result<()> {
    match targets.iter().find(|&&t| t >= vocab && Some(t) != pad_id) {
        Some(&target) => Err(Error::TargetOutOfRange { target, vocab }),
        None => Ok(()),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "label smoothing {alpha} outside [0, 1]"
        )))
    }
}

/// Loss of one row given its log-probabilities.
#[inline]
pub fn row_loss<T: Real>(logq: &[T], target: usize, alpha: T) -> T {
    let v = T::from_usize(logq.len());
    let off = alpha / v;
    let on = T::one() - alpha + off;
    let mut rest = T::zero();
    for (i, &l) in logq.iter().enumerate() {
        if i != target {
            rest += l;
        }
    }
    -(on * logq[target]) - off * rest
}

/// Returns `(loss, token_count)`; pad rows contribute nothing.
pub fn ls_cross_entropy_forward<T: Real>(
    logq: &Tensor<T>,
    targets: &[usize],
    alpha: f64,
    pad_id: Option<usize>,
) -> Result<(T, usize)> {
    check_alpha(alpha)?;
    let v = logq.cols();
    if targets.len() != logq.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            logq.rows()
        )));
    }
    check_targets(targets, v, pad_id)?;
    let a = T::from_f64(alpha);
    let data = logq.data();
    let losses = par::map_indices(targets.len(), |r| {
        if Some(targets[r]) == pad_id {
            T::zero()
        } else {
            row_loss(&data[r * v..(r + 1) * v], targets[r], a)
        }
    });
    let count = targets.iter().filter(|&&t| Some(t) != pad_id).count();
    Ok((pairwise_sum(&losses), count))
}

/// Summary of a fused criterion pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriterionStats {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

/// Fused log-softmax, smoothed cross-entropy and its gradient.
///
/// Reads logits row by row and overwrites them in place with
/// `grad_scale * dL/dh`, where `dL/dh_i = q_i - alpha/V - (1 - alpha)[i = k]`.
/// Pad rows get a zero gradient. `correct` counts rows whose arg-max equals
/// the target.
pub fn fused_criterion_in_place<T: Real>(
    logits: &mut [T],
    vocab: usize,
    targets: &[usize],
    alpha: f64,
    pad_id: Option<usize>,
    grad_scale: T,
) -> Result<CriterionStats> {
    check_alpha(alpha)?;
    check_targets(targets, vocab, pad_id)?;
    if logits.len() != targets.len() * vocab {
        return Err(Error::ShapeMismatch("criterion logits".into()));
    }
    let a = T::from_f64(alpha);
    let off = a / T::from_usize(vocab);
    let on = T::one() - a;
    let rows: Vec<(T, bool)> = {
        let mut out = vec![(T::zero(), false); targets.len()];
        par::for_each_row2(logits, vocab, &mut out, 1, |r, h, o| {
            let k = targets[r];
            if Some(k) == pad_id {
                h.fill(T::zero());
                return;
            }
            let argmax = h
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > h[best] { i } else { best });
            // Reuse the row as log-probabilities, then turn them into the
            // gradient element-wise.
            log_softmax_row_in_place(h);
            let loss = row_loss(h, k, a);
            for (i, g) in h.iter_mut().enumerate() {
                let q = g.exp();
                let mut d = q - off;
                if i == k {
                    d -= on;
                }
                *g = d * grad_scale;
            }
            o[0] = (loss, argmax == k);
        });
        out
    };
    let losses: Vec<f64> = rows.iter().map(|(l, _)| Real::to_f64(*l)).collect();
    Ok(CriterionStats {
        loss: pairwise_sum(&losses),
        tokens: targets.iter().filter(|&&t| Some(t) != pad_id).count(),
        correct: rows
            .iter()
            .zip(targets)
            .filter(|((_, ok), &t)| *ok && Some(t) != pad_id)
            .count(),
    })
}
