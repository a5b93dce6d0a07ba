//! Pre-LayerNorm encoder-decoder Transformer built on the fused kernels.

pub mod blocks;
pub mod config;
pub mod cross;
pub mod layers;
pub mod params;
pub mod transformer;

pub use config::{sinusoidal_positions, ModelConfig};
pub use cross::{pack_cross_weights, packed_kv_backward, packed_kv_forward, PackedCrossWeights};
pub use params::{FlatParams, GradSink, NullSink, ParamId, ParamLayout, ParamSource, ParamSpec};
pub use transformer::{
    dropout_site_seed, ActivationStash, BackwardEvent, Batch, LayerGrads, LayerKind, LayerPass,
    StepOptions, StepResult, Transformer,
};
