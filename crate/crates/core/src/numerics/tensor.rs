use crate::error::{Error, Result};

use super::half::{b16_to_b32, b32_to_b16, Half};
use super::real::{DType, Element};

pub const MAX_RANK: usize = 4;

/// Dense row-major tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    /// Builds a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of every dimension but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * T::DTYPE.size_bytes()
    }
}

impl Tensor<f32> {
    pub fn to_half(&self) -> Tensor<Half> {
        self.map(b32_to_b16)
    }
}

impl Tensor<Half> {
    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(b16_to_b32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::zeros(&[]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn rows_and_cols() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.rows(), 6);
        assert_eq!(t.cols(), 4);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(t.dtype(), DType::B64);
    }

    #[test]
    fn half_roundtrip() {
        let t = Tensor::new(&[3], vec![1.0f32, 0.5, -2.0]).unwrap();
        assert_eq!(t.to_half().to_f32(), t);
        assert_eq!(t.to_half().size_bytes(), 6);
    }
}
