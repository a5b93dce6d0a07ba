//! Replays a plan against its lifetimes with per-tensor fill patterns.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::plan::{Lifetime, MemoryPlan};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// A live tensor read back another tensor's pattern.
    Clobbered {
        step: usize,
        tensor: usize,
        block: usize,
        by: usize,
    },
    /// The tensor does not fit its block.
    Overflow {
        tensor: usize,
        block: usize,
        size: usize,
        block_size: usize,
    },
    Unassigned {
        tensor: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub steps: usize,
    pub violations: Vec<Violation>,
}

impl SafetyReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn pattern(id: usize, k: usize) -> u64 {
    ((id as u64 + 1) << 32) | (k as u64 & 0xFFFF_FFFF)
}

/// At every step each tensor that starts there writes its pattern into its
/// block, then every live tensor checks its cells. Never panics.
pub fn simulate_plan_safety(plan: &MemoryPlan, lifetimes: &[Lifetime]) -> SafetyReport {
    let mut report = SafetyReport::default();
    let mut cells: Vec<Vec<u64>> = plan.blocks.iter().map(|b| vec![0; b.size]).collect();
    let mut placed = Vec::new();
    for l in lifetimes {
        match plan.block_of(l.id) {
            Some(b) if b < cells.len() && l.size <= cells[b].len() => placed.push((l, b)),
            Some(b) if b < cells.len() => report.violations.push(Violation::Overflow {
                tensor: l.id,
                block: b,
                size: l.size,
                block_size: cells[b].len(),
            }),
            _ => report
                .violations
                .push(Violation::Unassigned { tensor: l.id }),
        }
    }
    let Some(end) = placed.iter().map(|(l, _)| l.last).max() else {
        return report;
    };
    let start = placed.iter().map(|(l, _)| l.first).min().unwrap_or(0);
    report.steps = end - start + 1;
    // Report each clobbered tensor once.
    let mut reported: HashMap<usize, ()> = HashMap::new();
    for step in start..=end {
        for (l, b) in placed.iter().filter(|(l, _)| l.first == step) {
            for (k, c) in cells[*b][..l.size].iter_mut().enumerate() {
                *c = pattern(l.id, k);
            }
        }
        for (l, b) in placed
            .iter()
            .filter(|(l, _)| l.first <= step && step <= l.last)
        {
            if reported.contains_key(&l.id) {
                continue;
            }
            if let Some(k) = (0..l.size).find(|&k| cells[*b][k] != pattern(l.id, k)) {
                let by = (cells[*b][k] >> 32) as usize;
                report.violations.push(Violation::Clobbered {
                    step,
                    tensor: l.id,
                    block: *b,
                    by: by.wrapping_sub(1),
                });
                reported.insert(l.id, ());
            }
        }
    }
    report
}
