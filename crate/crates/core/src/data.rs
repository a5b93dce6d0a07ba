//! Token data: file ingestion, synthetic tasks and length-bucketed batches.
//!
//! Batches are a pure function of `(seed, step)`: each epoch's pool is
//! bucketed by length, packed up to a token budget and shuffled from the
//! counter RNG, so a resumed run sees the same batches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memplan::DatasetStats;
use crate::model::Batch;
use crate::numerics::CounterRng;

/// Parses one sequence per line of whitespace-separated token ids. Empty
/// lines are skipped; line numbers in errors are 1-based.
pub fn parse_tokens(text: &str, vocab: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{tok}` is not a token id"),
            })?;
            if id >= vocab {
                return Err(Error::TokenFileOutOfRange {
                    line: line_no,
                    token: id,
                    vocab,
                });
            }
            seq.push(id);
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn load_token_file(path: impl AsRef<Path>, vocab: usize) -> Result<Vec<Vec<usize>>> {
    parse_tokens(&std::fs::read_to_string(path)?, vocab)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    File,
}

/// Where training pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: Task,
    /// Token file for `task = file`: consecutive non-empty lines form
    /// (source, target) pairs.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub pad_id: usize,
    #[serde(default = "default_bos")]
    pub bos_id: usize,
    /// Synthetic sequence lengths, inclusive.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Pairs drawn per epoch for synthetic tasks.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
}

fn default_bos() -> usize {
    1
}
fn default_min_len() -> usize {
    1
}
fn default_pool() -> usize {
    4096
}

impl DataConfig {
    pub fn synthetic(task: Task) -> Self {
        Self {
            task,
            path: None,
            pad_id: 0,
            bos_id: 1,
            min_len: 1,
            max_len: None,
            pool_size: default_pool(),
        }
    }
}

pub type Pair = (Vec<usize>, Vec<usize>);

/// Symbols for synthetic sequences: every id except pad and BOS.
fn symbols(vocab: usize, pad: usize, bos: usize) -> Vec<usize> {
    (0..vocab).filter(|&t| t != pad && t != bos).collect()
}

/// Synthetic pair `index` of a task: a random source and its copy or
/// reversal.
pub fn synthetic_pair(
    task: Task,
    rng: &CounterRng,
    index: u64,
    syms: &[usize],
    lens: (usize, usize),
) -> Pair {
    let r = rng.fork(index);
    let len = lens.0 + r.below(0, (lens.1 - lens.0 + 1) as u64) as usize;
    let src: Vec<usize> = (0..len)
        .map(|i| syms[r.below(1 + i as u64, syms.len() as u64) as usize])
        .collect();
    let tgt = match task {
        Task::Reverse => src.iter().rev().copied().collect(),
        _ => src.clone(),
    };
    (src, tgt)
}

/// Sorts by length, then packs consecutive pairs while
/// `count * longest <= batch_tokens`.
pub fn bucket(pairs: &[Pair], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let key = |i: usize| (pairs[i].0.len().max(pairs[i].1.len()), pairs[i].0.len(), i);
    order.sort_by_key(|&i| key(i));
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let l = pairs[i].0.len().max(pairs[i].1.len());
        if !cur.is_empty() && (cur.len() + 1) * longest.max(l) > batch_tokens {
            out.push(std::mem::take(&mut cur));
            longest = 0;
        }
        cur.push(i);
        longest = longest.max(l);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn shuffle<T>(v: &mut [T], rng: &CounterRng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i as u64, i as u64 + 1) as usize;
        v.swap(i, j);
    }
}

/// Deterministic stream of training batches.
pub struct DataSource {
    cfg: DataConfig,
    vocab: usize,
    max_len: usize,
    batch_tokens: usize,
    rng: CounterRng,
    file_pairs: Vec<Pair>,
    syms: Vec<usize>,
    /// `(epoch, first step of the epoch, batches)`.
    epoch: Option<(u64, u64, Vec<Batch>)>,
}

impl DataSource {
    /// `max_len` is the model's sequence limit; longer file sequences are a
    /// data error.
    pub fn new(
        cfg: &DataConfig,
        vocab: usize,
        max_len: usize,
        batch_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_tokens < max_len {
            return Err(Error::InvalidConfig(format!(
                "batch_tokens {batch_tokens} < max_len {max_len}"
            )));
        }
        let syms = symbols(vocab, cfg.pad_id, cfg.bos_id);
        if syms.is_empty() || cfg.pad_id >= vocab || cfg.bos_id >= vocab {
            return Err(Error::InvalidConfig(
                "vocabulary leaves no symbols beside pad and BOS".into(),
            ));
        }
        let mut file_pairs = Vec::new();
        if cfg.task == Task::File {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("file task needs data.path".into()))?;
            let seqs = load_token_file(path, vocab)?;
            if seqs.len() < 2 || seqs.len() % 2 != 0 {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("{} sequences do not form pairs", seqs.len()),
                });
            }
            for (k, p) in seqs.chunks(2).enumerate() {
                if p[0].len() > max_len || p[1].len() > max_len {
                    return Err(Error::SequenceTooLong {
                        len: p[0].len().max(p[1].len()),
                        max_len,
                    });
                }
                if p[0].is_empty() || p[1].is_empty() {
                    return Err(Error::Parse {
                        line: 2 * k + 1,
                        msg: "empty sequence".into(),
                    });
                }
                file_pairs.push((p[0].clone(), p[1].clone()));
            }
        } else {
            let hi = cfg.max_len.unwrap_or(max_len);
            if cfg.min_len == 0 || cfg.min_len > hi || hi > max_len {
                return Err(Error::InvalidConfig(format!(
                    "synthetic lengths [{}, {hi}] vs max_len {max_len}",
                    cfg.min_len
                )));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            max_len,
            batch_tokens,
            rng: CounterRng::new(seed).fork(0xDA7A),
            file_pairs,
            syms,
            epoch: None,
        })
    }

    fn lens(&self) -> (usize, usize) {
        (self.cfg.min_len, self.cfg.max_len.unwrap_or(self.max_len))
    }

    /// Pairs of synthetic pool `pool` (training epochs and evaluation use
    /// disjoint pool ids).
    fn synthetic_pool(&self, pool: u64) -> Vec<Pair> {
        let r = self.rng.fork(pool);
        (0..self.cfg.pool_size as u64)
            .map(|i| synthetic_pair(self.cfg.task, &r, i, &self.syms, self.lens()))
            .collect()
    }

    fn make_batches(&self, pairs: &[Pair], shuffle_seed: &CounterRng) -> Result<Vec<Batch>> {
        let mut groups = bucket(pairs, self.batch_tokens);
        shuffle(&mut groups, shuffle_seed);
        groups
            .iter()
            .map(|g| {
                let ps: Vec<Pair> = g.iter().map(|&i| pairs[i].clone()).collect();
                Batch::from_pairs(&ps, self.cfg.pad_id, self.cfg.bos_id)
            })
            .collect()
    }

    fn epoch_batches(&self, e: u64) -> Result<Vec<Batch>> {
        let shuffle_rng = self.rng.fork(1 << 40).fork(e);
        if self.cfg.task == Task::File {
            self.make_batches(&self.file_pairs, &shuffle_rng)
        } else {
            self.make_batches(&self.synthetic_pool(e), &shuffle_rng)
        }
    }

    /// The batch used at training step `step` (0-based).
    pub fn batch_at(&mut self, step: u64) -> Result<Batch> {
        let restart = match &self.epoch {
            Some((_, start, _)) => step < *start,
            None => true,
        };
        if restart {
            self.epoch = Some((0, 0, self.epoch_batches(0)?));
        }
        loop {
            let (e, start, batches) = self.epoch.as_ref().unwrap();
            let end = start + batches.len() as u64;
            if step < end {
                return Ok(batches[(step - start) as usize].clone());
            }
            let next = e + 1;
            self.epoch = Some((next, end, self.epoch_batches(next)?));
        }
    }

    /// Held-out batches: a fresh synthetic pool, or the first training
    /// epoch for file data.
    pub fn eval_batches(&self) -> Result<Vec<Batch>> {
        if self.cfg.task == Task::File {
            self.epoch_batches(0)
        } else {
            self.make_batches(&self.synthetic_pool(u64::MAX), &self.rng.fork(u64::MAX))
        }
    }

    /// Bounding shape of every batch this source can produce.
    pub fn stats(&self) -> DatasetStats {
        let (src, tgt, longest_min) = if self.cfg.task == Task::File {
            let s = self.file_pairs.iter().map(|p| p.0.len()).max().unwrap_or(1);
            let t = self.file_pairs.iter().map(|p| p.1.len()).max().unwrap_or(1);
            let m = self
                .file_pairs
                .iter()
                .map(|p| p.0.len().max(p.1.len()))
                .min()
                .unwrap_or(1);
            (s, t, m)
        } else {
            let (lo, hi) = self.lens();
            (hi, hi, lo)
        };
        DatasetStats {
            max_batch: (self.batch_tokens / longest_min).max(1),
            max_src_len: src,
            max_tgt_len: tgt,
            batch_tokens: Some(self.batch_tokens),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn pad_id(&self) -> usize {
        self.cfg.pad_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_tokens("1 2 3\n4 5\n", 10).unwrap(),
            vec![vec![1, 2, 3], vec![4, 5]]
        );
        assert_eq!(parse_tokens("\n  \n7\n", 10).unwrap(), vec![vec![7]]);
        assert!(matches!(
            parse_tokens("1 x 3", 10),
            Err(Error::Parse { line: 1, .. })
        ));
        assert_eq!(
            parse_tokens("1\n2 10", 10).unwrap_err(),
            Error::TokenFileOutOfRange {
                line: 2,
                token: 10,
                vocab: 10
            }
        );
    }

    #[test]
    fn tasks() {
        let rng = CounterRng::new(4);
        let syms = symbols(8, 0, 1);
        let (s, t) = synthetic_pair(Task::Copy, &rng, 3, &syms, (2, 6));
        assert_eq!(s, t);
        assert!((2..=6).contains(&s.len()) && s.iter().all(|&x| x >= 2));
        let (s, t) = synthetic_pair(Task::Reverse, &rng, 3, &syms, (2, 6));
        assert_eq!(s.iter().rev().copied().collect::<Vec<_>>(), t);
    }

    #[test]
    fn buckets_respect_budget() {
        let rng = CounterRng::new(1);
        let syms = symbols(16, 0, 1);
        let pairs: Vec<Pair> = (0..500)
            .map(|i| synthetic_pair(Task::Copy, &rng, i, &syms, (1, 16)))
            .collect();
        let groups = bucket(&pairs, 64);
        let mut seen: Vec<usize> = groups.concat();
        seen.sort();
        assert_eq!(seen, (0..500).collect::<Vec<_>>());
        for g in &groups {
            let longest = g.iter().map(|&i| pairs[i].0.len()).max().unwrap();
            assert!(g.len() * longest <= 64);
        }
    }

    #[test]
    fn stream_is_a_function_of_step() {
        let cfg = DataConfig {
            pool_size: 64,
            ..DataConfig::synthetic(Task::Copy)
        };
        let mut a = DataSource::new(&cfg, 12, 8, 32, 9).unwrap();
        let mut b = DataSource::new(&cfg, 12, 8, 32, 9).unwrap();
        let seq: Vec<Batch> = (0..40).map(|s| a.batch_at(s).unwrap()).collect();
        assert_eq!(b.batch_at(37).unwrap(), seq[37]);
        assert_eq!(b.batch_at(3).unwrap(), seq[3]);
        let st = a.stats();
        for bt in &seq {
            assert!(
                bt.batch <= st.max_batch
                    && bt.src_len <= st.max_src_len
                    && bt.tgt_len <= st.max_tgt_len
            );
            assert!(bt.batch * bt.src_len.max(bt.tgt_len) <= 32);
        }
    }

    #[test]
    fn file_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, "2 3 4\n4 3 2\n\n5 6\n6 5\n").unwrap();
        let cfg = DataConfig {
            path: Some(p.to_string_lossy().into()),
            ..DataConfig::synthetic(Task::File)
        };
        let mut d = DataSource::new(&cfg, 8, 4, 8, 0).unwrap();
        let b = d.batch_at(0).unwrap();
        assert!(b.batch >= 1);
        std::fs::write(&p, "2 3 4\n").unwrap();
        assert!(DataSource::new(&cfg, 8, 4, 8, 0).is_err());
    }
}
