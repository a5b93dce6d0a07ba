//! Worst-case capacity from one traced pass.

use serde::{Deserialize, Serialize};

use super::arena::{merge_traces, Arena};
use super::plan::{naive_total, plan, Lifetime, MemoryPlan};
use crate::error::Result;
use crate::numerics::Element;

/// Largest batch shape the data can produce. Every temporary's size grows
/// monotonically in each field, so the corner bounds every batch.
///
/// With a token budget, batches are known to satisfy
/// `count * max(src, tgt) <= budget`, and [`DatasetStats::corners`] lists
/// one corner per longest length instead of the single joint maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub max_batch: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    #[serde(default)]
    pub batch_tokens: Option<usize>,
}

/// One bounding batch shape: `count` pairs padded to `src` by `tgt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Corner {
    pub count: usize,
    pub src: usize,
    pub tgt: usize,
}

impl DatasetStats {
    /// Shapes whose element-wise maximum covers every batch.
    pub fn corners(&self) -> Vec<Corner> {
        let joint = Corner {
            count: self.max_batch.max(1),
            src: self.max_src_len,
            tgt: self.max_tgt_len,
        };
        let Some(budget) = self.batch_tokens else {
            return vec![joint];
        };
        let longest = self.max_src_len.max(self.max_tgt_len);
        let mut out: Vec<Corner> = Vec::new();
        for l in 1..=longest {
            let c = Corner {
                count: (budget / l).clamp(1, joint.count),
                src: l.min(self.max_src_len),
                tgt: l.min(self.max_tgt_len),
            };
            // Drop corners dominated by the previous one.
            if let Some(prev) = out.last() {
                if prev.count == c.count && prev.src <= c.src && prev.tgt <= c.tgt {
                    out.pop();
                }
            }
            out.push(c);
        }
        out
    }
}

/// A traced request sequence and its block plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Capacity {
    pub lifetimes: Vec<Lifetime>,
    pub plan: MemoryPlan,
}

impl Capacity {
    /// Elements the planned arena holds; no pass of the same shape family
    /// can have more live at once.
    pub fn bound(&self) -> usize {
        self.plan.peak
    }

    /// Elements needed if no temporary shared memory.
    pub fn naive(&self) -> usize {
        naive_total(&self.lifetimes)
    }

    pub fn arena<T: Element>(&self) -> Result<Arena<T>> {
        Arena::planned(&self.plan, &self.lifetimes)
    }
}

/// Runs `pass` once against a tracing arena and plans its lifetimes.
pub fn estimate_capacity<T: Element>(
    pass: impl FnOnce(&mut Arena<T>) -> Result<()>,
) -> Result<Capacity> {
    let mut pass = Some(pass);
    estimate_capacity_over(1, |_, a| pass.take().map_or(Ok(()), |f| f(a)))
}

/// Traces `pass` once per shape index in `0..shapes`, takes the per-request
/// maximum size across traces, and plans the result. Every trace must issue
/// the same request sequence.
pub fn estimate_capacity_over<T: Element>(
    shapes: usize,
    mut pass: impl FnMut(usize, &mut Arena<T>) -> Result<()>,
) -> Result<Capacity> {
    let mut traces = Vec::with_capacity(shapes);
    for i in 0..shapes {
        let mut arena = Arena::trace();
        pass(i, &mut arena)?;
        traces.push(arena.lifetimes()?);
    }
    let lifetimes = merge_traces(&traces)?;
    let plan = plan(&lifetimes)?;
    Ok(Capacity { lifetimes, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_buffers_share() {
        let cap = estimate_capacity::<f32>(|a| {
            a.begin_pass()?;
            let x = a.take(10)?;
            a.give(x);
            let y = a.take(6)?;
            a.give(y);
            a.end_pass()
        })
        .unwrap();
        assert_eq!(cap.bound(), 10);
        assert_eq!(cap.naive(), 16);
        let mut arena = cap.arena::<f32>().unwrap();
        arena.begin_pass().unwrap();
        let x = arena.take(7).unwrap();
        arena.give(x);
        let y = arena.take(6).unwrap();
        arena.give(y);
        arena.end_pass().unwrap();
        assert_eq!(arena.stats().reallocations, 0);
    }

    #[test]
    fn corners_follow_the_token_budget() {
        let mut s = DatasetStats {
            max_batch: 32,
            max_src_len: 4,
            max_tgt_len: 6,
            batch_tokens: None,
        };
        assert_eq!(s.corners().len(), 1);
        s.batch_tokens = Some(12);
        let c = s.corners();
        for l in 1..=6usize {
            let need = Corner {
                count: (12 / l).min(32),
                src: l.min(4),
                tgt: l,
            };
            assert!(
                c.iter()
                    .any(|k| k.count >= need.count && k.src >= need.src && k.tgt >= need.tgt),
                "{need:?} uncovered by {c:?}"
            );
        }
        assert!(c.iter().all(|k| k.count * k.src.max(k.tgt) <= 12));
    }

    #[test]
    fn traces_merge_to_the_larger_size() {
        let cap = estimate_capacity_over::<f32>(3, |i, a| {
            a.begin_pass()?;
            let x = a.take(10 - i)?;
            let y = a.take(2 + 3 * i)?;
            a.give(x);
            a.give(y);
            a.end_pass()
        })
        .unwrap();
        assert_eq!(cap.bound(), 10 + 8);
        let mismatched = estimate_capacity_over::<f32>(2, |i, a| {
            a.begin_pass()?;
            for _ in 0..=i {
                let x = a.take(1)?;
                a.give(x);
            }
            a.end_pass()
        });
        assert!(mismatched.is_err());
    }
}
