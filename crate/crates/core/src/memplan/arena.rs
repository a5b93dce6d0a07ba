//! One-shot temporary arena driven by a traced plan.
//!
//! A run of the model requests buffers in a fixed order. In `Trace` mode the
//! arena records each request's size and the steps at which it was taken and
//! returned; those lifetimes feed [`plan`](super::plan::plan). In `Planned`
//! mode every request is served from its preallocated block, so no memory is
//! allocated after setup. `Heap` mode simply allocates.

use std::ops::{Deref, DerefMut};

use super::plan::{Lifetime, MemoryPlan};
use crate::error::{Error, Result};
use crate::numerics::Element;

/// A buffer borrowed from an [`Arena`]; hand it back with [`Arena::give`].
#[derive(Debug)]
pub struct ArenaBuf<T> {
    id: usize,
    data: Vec<T>,
}

impl<T> ArenaBuf<T> {
    pub fn id(&self) -> usize {
        self.id
    }
}

impl<T> Deref for ArenaBuf<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for ArenaBuf<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArenaMode {
    Heap,
    Trace,
    Planned,
}

/// Counters exposed for instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ArenaStats {
    /// Planned elements (0 outside planned mode).
    pub capacity: usize,
    /// Largest sum of live request sizes seen.
    pub live_high_water: usize,
    /// Sum over blocks of the largest request each block has served.
    pub touched_high_water: usize,
    /// Block buffers that had to be (re)allocated after setup.
    pub reallocations: usize,
    /// Fresh allocations in heap or trace mode.
    pub heap_allocations: usize,
    pub passes: usize,
}

#[derive(Debug)]
pub struct Arena<T> {
    mode: ArenaMode,
    step: usize,
    next_id: usize,
    outstanding: usize,
    live: usize,
    trace: Vec<(usize, usize, Option<usize>)>,
    assignment: Vec<usize>,
    blocks: Vec<Option<Vec<T>>>,
    block_sizes: Vec<usize>,
    block_used: Vec<usize>,
    stats: ArenaStats,
}

impl<T: Element> Arena<T> {
    fn with_mode(mode: ArenaMode) -> Self {
        Self {
            mode,
            step: 0,
            next_id: 0,
            outstanding: 0,
            live: 0,
            trace: Vec::new(),
            assignment: Vec::new(),
            blocks: Vec::new(),
            block_sizes: Vec::new(),
            block_used: Vec::new(),
            stats: ArenaStats::default(),
        }
    }

    pub fn heap() -> Self {
        Self::with_mode(ArenaMode::Heap)
    }

    pub fn trace() -> Self {
        Self::with_mode(ArenaMode::Trace)
    }

    /// Allocates every block of `plan` once. `lifetimes` must be the traced
    /// ones the plan was built from (ids are request indices).
    pub fn planned(plan: &MemoryPlan, lifetimes: &[Lifetime]) -> Result<Self> {
        let mut a = Self::with_mode(ArenaMode::Planned);
        a.assignment = vec![usize::MAX; lifetimes.len()];
        for l in lifetimes {
            let b = plan
                .block_of(l.id)
                .ok_or_else(|| Error::Arena(format!("tensor {} has no block", l.id)))?;
            *a.assignment.get_mut(l.id).ok_or_else(|| {
                Error::Arena(format!("tensor id {} is not a request index", l.id))
            })? = b;
        }
        a.block_sizes = plan.blocks.iter().map(|b| b.size).collect();
        a.blocks = a
            .block_sizes
            .iter()
            .map(|&s| Some(Vec::with_capacity(s)))
            .collect();
        a.block_used = vec![0; plan.blocks.len()];
        a.stats.capacity = plan.peak;
        Ok(a)
    }

    pub fn mode(&self) -> ArenaMode {
        self.mode
    }

    pub fn stats(&self) -> ArenaStats {
        self.stats
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    /// Starts a new request sequence (one forward/backward pass).
    pub fn begin_pass(&mut self) -> Result<()> {
        if self.outstanding != 0 {
            return Err(Error::Arena(format!(
                "{} buffers still out at pass start",
                self.outstanding
            )));
        }
        if self.mode == ArenaMode::Trace && self.stats.passes > 0 {
            return Err(Error::Arena("a trace arena records a single pass".into()));
        }
        self.step = 0;
        self.next_id = 0;
        self.stats.passes += 1;
        Ok(())
    }

    /// Checks that every buffer came back and, when planned, that the pass
    /// issued exactly the traced number of requests.
    pub fn end_pass(&mut self) -> Result<()> {
        if self.outstanding != 0 {
            return Err(Error::Arena(format!(
                "{} buffers leaked by the pass",
                self.outstanding
            )));
        }
        if self.mode == ArenaMode::Planned && self.next_id != self.assignment.len() {
            return Err(Error::Arena(format!(
                "pass made {} requests, plan has {}",
                self.next_id,
                self.assignment.len()
            )));
        }
        Ok(())
    }

    /// A zero-filled buffer of `len` elements.
    pub fn take(&mut self, len: usize) -> Result<ArenaBuf<T>> {
        let id = self.next_id;
        self.next_id += 1;
        self.step += 1;
        self.outstanding += 1;
        self.live += len;
        self.stats.live_high_water = self.stats.live_high_water.max(self.live);
        let data = match self.mode {
            ArenaMode::Heap | ArenaMode::Trace => {
                if self.mode == ArenaMode::Trace {
                    self.trace.push((len, self.step, None));
                }
                self.stats.heap_allocations += 1;
                self.stats.touched_high_water += len;
                vec![T::default(); len]
            }
            ArenaMode::Planned => {
                let b = *self.assignment.get(id).ok_or_else(|| {
                    Error::Arena(format!(
                        "request {id} beyond the {} planned",
                        self.assignment.len()
                    ))
                })?;
                if len > self.block_sizes[b] {
                    return Err(Error::Arena(format!(
                        "request {id} of {len} elements exceeds block {b} of {}",
                        self.block_sizes[b]
                    )));
                }
                let mut v = match self.blocks[b].take() {
                    Some(v) => v,
                    None => {
                        self.stats.reallocations += 1;
                        Vec::with_capacity(self.block_sizes[b])
                    }
                };
                let cap = v.capacity();
                v.clear();
                v.resize(len, T::default());
                if v.capacity() != cap {
                    self.stats.reallocations += 1;
                }
                if len > self.block_used[b] {
                    self.stats.touched_high_water += len - self.block_used[b];
                    self.block_used[b] = len;
                }
                v
            }
        };
        Ok(ArenaBuf { id, data })
    }

    /// A buffer initialised from `src`.
    pub fn take_copy(&mut self, src: &[T]) -> Result<ArenaBuf<T>> {
        let mut b = self.take(src.len())?;
        b.copy_from_slice(src);
        Ok(b)
    }

    pub fn give(&mut self, buf: ArenaBuf<T>) {
        self.step += 1;
        self.outstanding -= 1;
        self.live -= buf.data.len();
        match self.mode {
            ArenaMode::Heap => {}
            ArenaMode::Trace => self.trace[buf.id].2 = Some(self.step),
            ArenaMode::Planned => {
                let b = self.assignment[buf.id];
                self.blocks[b] = Some(buf.data);
            }
        }
    }

    /// Lifetimes of the recorded pass; ids are request indices.
    pub fn lifetimes(&self) -> Result<Vec<Lifetime>> {
        if self.mode != ArenaMode::Trace {
            return Err(Error::Arena(
                "lifetimes are only recorded in trace mode".into(),
            ));
        }
        self.trace
            .iter()
            .enumerate()
            .map(|(id, &(size, first, last))| {
                let last =
                    last.ok_or_else(|| Error::Arena(format!("request {id} never returned")))?;
                Ok(Lifetime::new(id, size.max(1), first, last))
            })
            .collect()
    }
}

/// Element-wise maximum of traced sizes across runs with identical request
/// sequences.
pub fn merge_traces(traces: &[Vec<Lifetime>]) -> Result<Vec<Lifetime>> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    let mut out = first.clone();
    for t in &traces[1..] {
        if t.len() != out.len() {
            return Err(Error::Arena(format!(
                "traces have {} and {} requests",
                out.len(),
                t.len()
            )));
        }
        for (a, b) in out.iter_mut().zip(t) {
            if (a.first, a.last) != (b.first, b.last) {
                return Err(Error::Arena(format!(
                    "request {} changed its lifetime between traces",
                    a.id
                )));
            }
            a.size = a.size.max(b.size);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memplan::plan::plan;

    fn run(arena: &mut Arena<f32>, n: usize) -> Result<()> {
        arena.begin_pass()?;
        let a = arena.take(n)?;
        let mut b = arena.take(2 * n)?;
        b[0] = a.len() as f32;
        arena.give(a);
        let c = arena.take(n)?;
        arena.give(b);
        arena.give(c);
        arena.end_pass()
    }

    #[test]
    fn trace_then_plan() {
        let mut t = Arena::trace();
        run(&mut t, 8).unwrap();
        let lt = t.lifetimes().unwrap();
        assert_eq!(lt[0], Lifetime::new(0, 8, 1, 3));
        let p = plan(&lt).unwrap();
        assert_eq!(p.peak, 24);
        let mut a = Arena::planned(&p, &lt).unwrap();
        for n in [8, 5, 8, 1] {
            run(&mut a, n).unwrap();
        }
        let s = a.stats();
        assert_eq!(s.reallocations, 0);
        assert!(s.touched_high_water <= s.capacity);
        assert_eq!(s.live_high_water, 24);
        assert!(run(&mut a, 9).is_err());
    }

    #[test]
    fn leak_is_reported() {
        let mut a = Arena::<f64>::heap();
        a.begin_pass().unwrap();
        let _b = a.take(3).unwrap();
        assert!(a.end_pass().is_err());
    }

    #[test]
    fn buffers_are_zeroed() {
        let mut t = Arena::trace();
        run(&mut t, 4).unwrap();
        let lt = t.lifetimes().unwrap();
        let mut a = Arena::<f32>::planned(&plan(&lt).unwrap(), &lt).unwrap();
        run(&mut a, 4).unwrap();
        a.begin_pass().unwrap();
        let x = a.take(4).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
        a.give(x);
    }
}
