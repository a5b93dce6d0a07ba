//! Static planning of temporary memory.
//!
//! Permanent tensors (parameters, gradients, optimizer state) live in the
//! trainer workspace. Temporaries are traced once at the worst-case batch
//! shape, assigned to shared blocks by lifetime, and served from an arena
//! allocated a single time.

pub mod arena;
pub mod attention;
pub mod capacity;
pub mod diagram;
pub mod plan;
pub mod safety;

pub use arena::{merge_traces, Arena, ArenaBuf, ArenaMode, ArenaStats};
pub use attention::{
    attention_backward_bound, attention_backward_lifetimes, naive_peak, PlanShape,
};
pub use capacity::{estimate_capacity, estimate_capacity_over, Capacity, Corner, DatasetStats};
pub use diagram::render_columns;
pub use plan::{classify, naive_total, plan, Block, Lifetime, MemoryPlan, TensorClass, TensorKind};
pub use safety::{simulate_plan_safety, SafetyReport, Violation};
