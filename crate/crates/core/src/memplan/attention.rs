//! The self-attention backward lifetime table and its closed-form bounds.

use serde::{Deserialize, Serialize};

use super::plan::Lifetime;
use crate::error::{Error, Result};

/// Batch size, hidden size, sequence length, head count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanShape {
    pub b: usize,
    pub h: usize,
    pub l: usize,
    pub n: usize,
}

impl PlanShape {
    pub fn new(b: usize, h: usize, l: usize, n: usize) -> Result<Self> {
        if b == 0 || h == 0 || l == 0 || n == 0 {
            return Err(Error::InvalidConfig(format!(
                "plan shape ({b}, {h}, {l}, {n}) needs all dims >= 1"
            )));
        }
        Ok(Self { b, h, l, n })
    }

    pub fn bhl(&self) -> usize {
        self.b * self.h * self.l
    }

    pub fn bl2n(&self) -> usize {
        self.b * self.l * self.l * self.n
    }
}

/// Temporaries of one self-attention backward pass.
///
/// Four reuse columns: three hold only `BHL`-sized tensors, the fourth holds
/// the attention-probability gradient (`BL²N`) and later the concatenated
/// QKV gradient (`3BHL`).
pub fn attention_backward_lifetimes(s: PlanShape) -> Vec<Lifetime> {
    let (bhl, bl2n) = (s.bhl(), s.bl2n());
    vec![
        Lifetime::new(0, bhl, 0, 1).named("grad_output"),
        Lifetime::new(1, bhl, 0, 2).named("grad_context"),
        Lifetime::new(2, bhl, 0, 2).named("value"),
        Lifetime::new(3, bl2n, 1, 3).named("grad_attn_probs"),
        Lifetime::new(4, bhl, 2, 5).named("grad_value"),
        Lifetime::new(5, bhl, 3, 5).named("grad_query"),
        Lifetime::new(6, bhl, 3, 5).named("grad_key"),
        Lifetime::new(7, 3 * bhl, 4, 6).named("grad_qkv"),
    ]
}

/// `3·BHL + max(3·BHL, BL²N)`.
pub fn attention_backward_bound(s: PlanShape) -> usize {
    3 * s.bhl() + (3 * s.bhl()).max(s.bl2n())
}

/// `9·BHL + BL²N`: every temporary in its own buffer.
pub fn naive_peak(s: PlanShape) -> usize {
    9 * s.bhl() + s.bl2n()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memplan::plan::{naive_total, plan};

    #[test]
    fn small_instance() {
        let s = PlanShape::new(1, 4, 2, 1).unwrap();
        let lt = attention_backward_lifetimes(s);
        assert_eq!(plan(&lt).unwrap().peak, 48);
        assert_eq!(naive_peak(s), 76);
        assert_eq!(naive_total(&lt), 76);
    }

    #[test]
    fn larger_instance() {
        let s = PlanShape::new(8, 256, 32, 4).unwrap();
        assert_eq!(plan(&attention_backward_lifetimes(s)).unwrap().peak, 393216);
        assert_eq!(naive_peak(s), 622592);
    }

    #[test]
    fn four_columns() {
        let s = PlanShape::new(2, 8, 4, 2).unwrap();
        let p = plan(&attention_backward_lifetimes(s)).unwrap();
        assert_eq!(p.blocks.len(), 4);
        assert_eq!(p.block_of(3), p.block_of(7));
    }
}
