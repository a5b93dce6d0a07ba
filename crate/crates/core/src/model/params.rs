//! Named parameter layout and the read/accumulate interfaces the model
//! uses to reach parameter storage.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Real, Tensor};

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters in registration order, laid out back to back.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    offsets: Vec<usize>,
    total: usize,
    by_name: HashMap<String, ParamId>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let id = self.specs.len();
        let spec = ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        };
        self.offsets.push(self.total);
        self.total += spec.len();
        self.by_name.insert(name.to_string(), id);
        self.specs.push(spec);
        Ok(id)
    }

    pub fn from_specs(specs: &[ParamSpec]) -> Result<Self> {
        let mut l = Self::new();
        for s in specs {
            l.push(&s.name, &s.shape)?;
        }
        Ok(l)
    }

    pub fn count(&self) -> usize {
        self.specs.len()
    }

    /// Total element count.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id].name
    }

    pub fn len(&self, id: ParamId) -> usize {
        self.specs[id].len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        self.offsets[id]..self.offsets[id] + self.specs[id].len()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

/// Read access to parameter values, converted to the compute type.
pub trait ParamSource<T> {
    /// Writes parameter `id` into `out`, whose length is the parameter's.
    fn read_into(&self, id: ParamId, out: &mut [T]);
}

/// Destination for parameter gradients. Contributions add up.
pub trait GradSink<T> {
    fn accumulate(&mut self, id: ParamId, grad: &[T]);
}

/// Discards every gradient.
pub struct NullSink;

impl<T> GradSink<T> for NullSink {
    fn accumulate(&mut self, _: ParamId, _: &[T]) {}
}

/// All parameters (or gradients) in one owned buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams<T> {
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Element> FlatParams<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::default(); layout.total()];
        Self { layout, data }
    }

    pub fn from_vec(layout: Arc<ParamLayout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for layout of {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[self.layout.range(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let r = self.layout.range(id);
        &mut self.data[r]
    }

    pub fn by_name(&self, name: &str) -> Result<&[T]> {
        Ok(self.get(self.layout.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let id = self.layout.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> FlatParams<U> {
        FlatParams {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor<T>)>> {
        self.layout
            .specs()
            .iter()
            .enumerate()
            .map(|(id, s)| {
                Ok((
                    s.name.clone(),
                    Tensor::new(&s.shape, self.get(id).to_vec())?,
                ))
            })
            .collect()
    }
}

impl<T: Copy> ParamSource<T> for FlatParams<T> {
    fn read_into(&self, id: ParamId, out: &mut [T]) {
        out.copy_from_slice(&self.data[self.layout.range(id)]);
    }
}

impl<T: Real> GradSink<T> for FlatParams<T> {
    fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        let r = self.layout.range(id);
        for (d, &g) in self.data[r].iter_mut().zip(grad) {
            *d += g;
        }
    }
}
