use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::half::Half;

/// Element storage type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    B16,
    B32,
    B64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::B16 => 2,
            DType::B32 => 4,
            DType::B64 => 8,
        }
    }
}

/// Anything a [`Tensor`](super::Tensor) can hold.
pub trait Element: Copy + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;
}

impl Element for Half {
    const DTYPE: DType = DType::B16;
}

impl Element for f32 {
    const DTYPE: DType = DType::B32;
}

impl Element for f64 {
    const DTYPE: DType = DType::B64;
}

/// Arithmetic element type for kernels: binary32 on the training path,
/// binary64 for gradient checking.
pub trait Real:
    Element + Float + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Display + PartialOrd
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
