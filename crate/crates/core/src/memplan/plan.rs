//! Lifetimes and greedy first-fit block assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive step interval during which a tensor's storage must stay intact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub id: usize,
    /// Element count.
    pub size: usize,
    pub first: usize,
    pub last: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Lifetime {
    pub fn new(id: usize, size: usize, first: usize, last: usize) -> Self {
        Self {
            id,
            size,
            first,
            last,
            name: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn overlaps(&self, other: &Lifetime) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    pub fn validate(&self) -> Result<()> {
        if self.first > self.last {
            return Err(Error::InvalidLifetime {
                id: self.id,
                reason: format!("first {} > last {}", self.first, self.last),
            });
        }
        if self.size == 0 {
            return Err(Error::InvalidLifetime {
                id: self.id,
                reason: "size 0".into(),
            });
        }
        Ok(())
    }
}

/// What a tensor holds, as far as the planner cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Parameter,
    Gradient,
    OptimizerState,
    Activation,
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorClass {
    /// Fixed size for the whole run.
    Permanent,
    /// Batch-shaped; lives in the shared arena.
    Temporary,
}

/// Parameters, gradients and optimizer state are permanent; everything else
/// is temporary. `tags[i]` belongs to tensor `i`.
pub fn classify(tags: &[Option<TensorKind>]) -> Result<Vec<TensorClass>> {
    tags.iter()
        .enumerate()
        .map(|(i, t)| match t {
            Some(TensorKind::Parameter | TensorKind::Gradient | TensorKind::OptimizerState) => {
                Ok(TensorClass::Permanent)
            }
            Some(TensorKind::Activation | TensorKind::Scratch) => Ok(TensorClass::Temporary),
            None => Err(Error::UntaggedTensor(i)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub size: usize,
}

/// Block sizes and the tensor-to-block map. All planned tensors are
/// temporaries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub blocks: Vec<Block>,
    /// Tensor id to block id.
    pub assignment: BTreeMap<usize, usize>,
    /// Sum of block sizes, in elements.
    pub peak: usize,
}

impl MemoryPlan {
    pub fn block_of(&self, tensor: usize) -> Option<usize> {
        self.assignment.get(&tensor).copied()
    }

    pub fn class_of(&self, tensor: usize) -> Option<TensorClass> {
        self.assignment.get(&tensor).map(|_| TensorClass::Temporary)
    }
}

/// Sum of all sizes: the footprint without any sharing.
pub fn naive_total(lifetimes: &[Lifetime]) -> usize {
    lifetimes.iter().map(|l| l.size).sum()
}

/// Greedy first-fit interval assignment.
///
/// Tensors are visited by first step (ties: larger first, then lower id).
/// Each goes to the lowest block whose occupants have all ended before it
/// starts, or opens a new block. A block's size is its largest occupant.
/// An empty input yields an empty plan.
pub fn plan(lifetimes: &[Lifetime]) -> Result<MemoryPlan> {
    let mut seen = std::collections::HashSet::new();
    for l in lifetimes {
        l.validate()?;
        if !seen.insert(l.id) {
            return Err(Error::InvalidLifetime {
                id: l.id,
                reason: "duplicate id".into(),
            });
        }
    }
    let mut order: Vec<&Lifetime> = lifetimes.iter().collect();
    order.sort_by(|a, b| {
        a.first
            .cmp(&b.first)
            .then(b.size.cmp(&a.size))
            .then(a.id.cmp(&b.id))
    });

    // Occupants of a block are disjoint and arrive in start order, so the
    // most recent one always ends last.
    let mut block_end: Vec<usize> = Vec::new();
    let mut blocks: Vec<Block> = Vec::new();
    let mut assignment = BTreeMap::new();
    for l in order {
        let slot = block_end.iter().position(|&end| end < l.first);
        let b = match slot {
            Some(b) => {
                block_end[b] = l.last;
                blocks[b].size = blocks[b].size.max(l.size);
                b
            }
            None => {
                block_end.push(l.last);
                blocks.push(Block {
                    id: blocks.len(),
                    size: l.size,
                });
                blocks.len() - 1
            }
        };
        assignment.insert(l.id, b);
    }
    let peak = blocks.iter().map(|b| b.size).sum();
    Ok(MemoryPlan {
        blocks,
        assignment,
        peak,
    })
}
