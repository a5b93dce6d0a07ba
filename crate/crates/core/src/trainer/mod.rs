//! Mixed-precision parameter updates over one binary16 workspace.

pub mod optim;
pub mod workspace;

pub use optim::{
    adam_step, count_non_finite, optimizer_step, sgd_step, Algorithm, OptimConfig, StateAccounting,
};
pub use workspace::{workspace_pack, GradsView, Link, ParamsView, Workspace};
