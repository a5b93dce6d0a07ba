use crate::error::{Error, Result};
use crate::kernels::dropout::DropoutMask;
use crate::kernels::embedding::{check_tokens, EmbeddingConfig};
use crate::numerics::{Real, Tensor};
use crate::par;

/// Positions of each token id, ascending. A counting sort, so the result
/// (and every sum built from it) is independent of thread count.
pub(crate) fn positions_by_token(tokens: &[usize], vocab: usize) -> (Vec<usize>, Vec<usize>) {
    let mut starts = vec![0usize; vocab + 1];
    for &t in tokens {
        starts[t + 1] += 1;
    }
    for v in 0..vocab {
        starts[v + 1] += starts[v];
    }
    let mut fill = starts.clone();
    let mut order = vec![0usize; tokens.len()];
    for (pos, &t) in tokens.iter().enumerate() {
        order[fill[t]] = pos;
        fill[t] += 1;
    }
    (starts, order)
}

/// Scatter-add of the embedding gradient into `d_table` (`V x d`, overwritten).
///
/// Each table row gathers the positions that used its token and sums their
/// masked, rescaled gradients in position order; rows of unused tokens are
/// exactly zero. When `d_pos` is given it receives the positional gradient
/// (`seq_len x d`, overwritten), summed over the batch in order.
#[allow(clippy::too_many_arguments)]
pub fn embedding_backward_into<T: Real>(
    dy: &[T],
    d: usize,
    tokens: &[usize],
    seq_len: usize,
    cfg: &EmbeddingConfig,
    mask: &DropoutMask,
    d_table: &mut [T],
    d_pos: Option<&mut [T]>,
) -> Result<()> {
    check_tokens(tokens, cfg.vocab)?;
    if dy.len() != tokens.len() * d || d_table.len() != cfg.vocab * d || mask.len() != dy.len() {
        return Err(Error::ShapeMismatch("embedding gradient operands".into()));
    }
    let (starts, order) = positions_by_token(tokens, cfg.vocab);
    let s = T::from_f64(cfg.scale as f64);
    let inv_keep = T::from_f64(mask.scale());
    par::for_each_row(d_table, d, |w, row| {
        row.fill(T::zero());
        for &pos in &order[starts[w]..starts[w + 1]] {
            for j in 0..d {
                let i = pos * d + j;
                if mask.kept(i) {
                    row[j] += dy[i] * inv_keep;
                }
            }
        }
        for v in row.iter_mut() {
            *v *= s;
        }
    });
    if let Some(d_pos) = d_pos {
        let batch = tokens.len() / seq_len;
        if d_pos.len() < seq_len * d {
            return Err(Error::ShapeMismatch("positional gradient buffer".into()));
        }
        d_pos.fill(T::zero());
        par::for_each_row(&mut d_pos[..seq_len * d], d, |t, row| {
            for b in 0..batch {
                let pos = b * seq_len + t;
                for j in 0..d {
                    let i = pos * d + j;
                    if mask.kept(i) {
                        row[j] += dy[i] * inv_keep;
                    }
                }
            }
        });
    }
    Ok(())
}

/// Returns `(dE, dP)`; `dP` (`max_len x d`) only when positions are learned.
pub fn embedding_backward<T: Real>(
    dy: &Tensor<T>,
    tokens: &[usize],
    mask: &DropoutMask,
    cfg: &EmbeddingConfig,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if dy.rank() != 3 || dy.shape()[0] * dy.shape()[1] != tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "dY {:?} for {} tokens",
            dy.shape(),
            tokens.len()
        )));
    }
    let (seq_len, d) = (dy.shape()[1], dy.shape()[2]);
    let mut de = Tensor::zeros(&[cfg.vocab, d])?;
    let mut dp = if cfg.learned_positional {
        Some(Tensor::zeros(&[cfg.max_len, d])?)
    } else {
        None
    };
    embedding_backward_into(
        dy.data(),
        d,
        tokens,
        seq_len,
        cfg,
        mask,
        de.data_mut(),
        dp.as_mut().map(|t| t.data_mut()),
    )?;
    Ok((de, dp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scale: f32, learned: bool) -> EmbeddingConfig {
        EmbeddingConfig {
            scale,
            vocab: 8,
            max_len: 4,
            learned_positional: learned,
        }
    }

    #[test]
    fn repeated_token_sums() {
        let dy = Tensor::new(&[1, 2, 3], vec![1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let mask = DropoutMask::keep_all(6);
        let (de, dp) = embedding_backward(&dy, &[5, 5], &mask, &cfg(2.0, false)).unwrap();
        assert!(dp.is_none());
        assert_eq!(de.row(5), &[22.0, 44.0, 66.0]);
        for w in (0..8).filter(|&w| w != 5) {
            assert!(de.row(w).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dropped_everything() {
        let dy = Tensor::<f64>::full(&[2, 2, 2], 1.0).unwrap();
        let mask = DropoutMask::from_bools(&[false; 8], 0.5).unwrap();
        let (de, dp) = embedding_backward(&dy, &[1, 2, 3, 1], &mask, &cfg(1.0, true)).unwrap();
        assert!(de.data().iter().all(|&v| v == 0.0));
        assert!(dp.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_gradient_sums_batch() {
        let dy = Tensor::new(&[2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (_, dp) = embedding_backward(
            &dy,
            &[0, 1, 2, 3],
            &DropoutMask::keep_all(4),
            &cfg(1.0, true),
        )
        .unwrap();
        assert_eq!(dp.unwrap().data(), &[4.0, 6.0, 0.0, 0.0]);
    }
}
