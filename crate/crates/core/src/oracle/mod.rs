//! Slow, independent binary64 reference: unfused primitives, a tape-based
//! model, finite differences and a per-tensor master-weight trainer.
//!
//! Nothing in here calls the fused kernels or gradients.

pub mod fd;
pub mod ops;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use fd::{fd_grad, max_rel_err, rel_err, FdConfig};
pub use ops::Mat;
pub use reference::{
    reference_forward_backward, reference_layer, LayerInput, LayerKind, LayerOutput, RefOutput,
};
pub use trainer::{reference_trainer_step, Adam64, MasterTensor, ReferenceTrainer};
