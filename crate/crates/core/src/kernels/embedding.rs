use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dropout::DropoutMask;
use crate::numerics::{Real, Tensor};
use crate::par;

/// Token and positional embedding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Multiplier applied to the token embedding only.
    pub scale: f32,
    pub vocab: usize,
    pub max_len: usize,
    pub learned_positional: bool,
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "embedding scale {} must be > 0",
                self.scale
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} must be >= 2",
                self.vocab
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

/// `out[b, i, :] = mask * (s * table[tokens[b, i]] + pos[i]) / (1 - p)`.
///
/// `tokens` is `batch x seq_len` row-major, `out` is `batch*seq_len x d`.
#[allow(clippy::too_many_arguments)]
pub fn embedding_forward_into<T: Real>(
    table: &[T],
    pos: &[T],
    d: usize,
    tokens: &[usize],
    seq_len: usize,
    cfg: &EmbeddingConfig,
    mask: &DropoutMask,
    out: &mut [T],
) -> Result<()> {
    check_tokens(tokens, cfg.vocab)?;
    if seq_len > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: seq_len,
            max_len: cfg.max_len,
        });
    }
    if table.len() != cfg.vocab * d
        || pos.len() < seq_len * d
        || out.len() != tokens.len() * d
        || mask.len() != out.len()
    {
        return Err(Error::ShapeMismatch("embedding operands".into()));
    }
    let s = T::from_f64(cfg.scale as f64);
    let inv_keep = T::from_f64(mask.scale());
    par::for_each_row(out, d, |r, row| {
        let tok = tokens[r];
        let e = &table[tok * d..(tok + 1) * d];
        let p = &pos[(r % seq_len) * d..(r % seq_len + 1) * d];
        let base = r * d;
        for j in 0..d {
            row[j] = if mask.kept(base + j) {
                (s * e[j] + p[j]) * inv_keep
            } else {
                T::zero()
            };
        }
    });
    Ok(())
}

/// Tensor-level embedding lookup with dropout drawn from `seed`.
pub fn embedding_forward<T: Real>(
    table: &Tensor<T>,
    pos: &Tensor<T>,
    tokens: &[usize],
    batch: usize,
    cfg: &EmbeddingConfig,
    p_drop: f64,
    seed: u64,
) -> Result<(Tensor<T>, DropoutMask)> {
    cfg.validate()?;
    let d = table.cols();
    if table.shape() != [cfg.vocab, d] || pos.shape() != [cfg.max_len, d] {
        return Err(Error::ShapeMismatch(format!(
            "embedding tables {:?} / {:?}",
            table.shape(),
            pos.shape()
        )));
    }
    if batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens for batch {batch}",
            tokens.len()
        )));
    }
    let seq_len = tokens.len() / batch;
    let mask = DropoutMask::generate(seed, p_drop, tokens.len() * d)?;
    let mut out = Tensor::zeros(&[batch, seq_len, d])?;
    embedding_forward_into(
        table.data(),
        pos.data(),
        d,
        tokens,
        seq_len,
        cfg,
        &mask,
        out.data_mut(),
    )?;
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rand_uniform;

    fn cfg(scale: f32) -> EmbeddingConfig {
        EmbeddingConfig {
            scale,
            vocab: 2,
            max_len: 2,
            learned_positional: false,
        }
    }

    fn tables() -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap(),
        )
    }

    #[test]
    fn direct_formula() {
        let (e, p) = tables();
        let (y, _) = embedding_forward(&e, &p, &[1, 0], 1, &cfg(1.0), 0.0, 0).unwrap();
        let want = [3.1, 4.2, 1.3, 2.4];
        y.data()
            .iter()
            .zip(want)
            .for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
        let (y, _) = embedding_forward(&e, &p, &[1, 0], 1, &cfg(2.0), 0.0, 0).unwrap();
        let want = [6.1, 8.2, 2.3, 4.4];
        y.data()
            .iter()
            .zip(want)
            .for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
    }

    #[test]
    fn dropout_matches_rng() {
        let (e, p) = tables();
        let seed = 1234;
        let (y, mask) = embedding_forward(&e, &p, &[1, 0], 1, &cfg(2.0), 0.5, seed).unwrap();
        let dense = [6.1, 8.2, 2.3, 4.4];
        for i in 0..4 {
            let keep = rand_uniform(seed, i as u64) >= 0.5;
            assert_eq!(mask.kept(i), keep);
            let want = if keep { dense[i] * 2.0 } else { 0.0 };
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let (e, p) = tables();
        assert_eq!(
            embedding_forward(&e, &p, &[2, 0], 1, &cfg(1.0), 0.0, 0).unwrap_err(),
            Error::TokenOutOfRange { token: 2, vocab: 2 }
        );
        assert_eq!(
            embedding_forward(&e, &p, &[1, 0, 1], 1, &cfg(1.0), 0.0, 0).unwrap_err(),
            Error::SequenceTooLong { len: 3, max_len: 2 }
        );
    }
}
