//! Tensor container, binary16 conversion and counter-based randomness.

pub mod half;
pub mod real;
pub mod reduce;
pub mod rng;
pub mod tensor;

pub use half::{b16_to_b32, b32_to_b16, Half};
pub use real::{DType, Element, Real};
pub use rng::{rand_uniform, splitmix64, CounterRng};
pub use tensor::Tensor;
