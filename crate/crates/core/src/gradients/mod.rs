//! Analytic backward operators paired with the forward kernels.

pub mod criterion;
pub mod elementwise;
pub mod embedding;
pub mod layernorm;
pub mod softmax;

pub use criterion::ls_cross_entropy_backward;
pub use elementwise::{bias_dropout_residual_backward, bias_relu_dropout_backward};
pub use embedding::embedding_backward;
pub use layernorm::{layernorm_backward, LNBackwardScratch};
pub use softmax::softmax_backward;
