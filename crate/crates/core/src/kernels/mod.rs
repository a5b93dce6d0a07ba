//! Fused forward operators and the GEMM backend.

pub mod criterion;
pub mod dropout;
pub mod elementwise;
pub mod embedding;
pub mod gemm;
pub mod layernorm;
pub mod softmax;
pub mod unfused;

pub use criterion::{fused_criterion_in_place, ls_cross_entropy_forward, CriterionStats};
pub use dropout::{BitMask, DropoutMask};
pub use elementwise::{
    bias_dropout_residual, bias_dropout_residual_with_mask, bias_relu_dropout,
    bias_relu_dropout_with_mask, Heads,
};
pub use embedding::{embedding_forward, EmbeddingConfig};
pub use gemm::{gemm, GemmDims};
pub use layernorm::{layernorm_forward, layernorm_forward_half, LNCache};
pub use softmax::{
    log_softmax_forward, select_softmax_strategy, softmax_forward, softmax_forward_with,
    AttentionMask, RowLayout, SoftmaxCache, SoftmaxStrategy,
};
