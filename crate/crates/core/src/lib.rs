//! Transformer training engine built from fused kernels with analytic
//! backward passes, a binary16 workspace trainer and a static memory
//! planner, plus an independent binary64 oracle to check them against.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradients;
pub mod kernels;
pub mod memplan;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Half, Real, Tensor};
