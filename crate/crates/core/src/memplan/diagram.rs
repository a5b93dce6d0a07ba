//! ASCII rendering of a plan: one row per block, one column per step.

use super::plan::{Lifetime, MemoryPlan};

fn label(l: &Lifetime) -> String {
    l.name.clone().unwrap_or_else(|| format!("t{}", l.id))
}

/// Each cell names the tensor occupying the block at that step, `.` when
/// the block is free.
pub fn render_columns(plan: &MemoryPlan, lifetimes: &[Lifetime]) -> String {
    let Some(end) = lifetimes.iter().map(|l| l.last).max() else {
        return "(empty plan)\n".to_string();
    };
    let start = lifetimes.iter().map(|l| l.first).min().unwrap_or(0);
    let width = lifetimes
        .iter()
        .map(|l| label(l).len())
        .max()
        .unwrap_or(1)
        .max(4);
    let mut out = format!("{:<16}", "step");
    for s in start..=end {
        out.push_str(&format!(" {:<width$}", s));
    }
    out.push('\n');
    for b in &plan.blocks {
        out.push_str(&format!("{:<16}", format!("block {} [{}]", b.id, b.size)));
        for s in start..=end {
            let who = lifetimes
                .iter()
                .find(|l| plan.block_of(l.id) == Some(b.id) && l.first <= s && s <= l.last)
                .map(label)
                .unwrap_or_else(|| ".".to_string());
            out.push_str(&format!(" {:<width$}", who));
        }
        out.push('\n');
    }
    out
}
