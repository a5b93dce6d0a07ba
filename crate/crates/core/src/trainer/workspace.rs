//! Contiguous binary16 parameter and gradient storage with named links.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlatParams, GradSink, ParamId, ParamSource};
use crate::numerics::half::{b16_to_b32, b32_to_b16};
use crate::numerics::Half;
use crate::par;

/// A named `(offset, len)` view into the workspace buffers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl Link {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// All parameters and gradients in two binary16 buffers, plus binary32
/// optimizer moments laid out identically.
///
/// Links are stored in registration order, so link `i` is model parameter
/// `i` when the workspace was packed from a model's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub params16: Vec<Half>,
    pub grads16: Vec<Half>,
    /// First moment for Adam, velocity for SGD.
    pub m: Vec<f32>,
    /// Second moment; empty unless Adam state has been allocated.
    pub v: Vec<f32>,
    /// Completed optimizer steps.
    pub step: u64,
    links: Vec<Link>,
    index: HashMap<String, usize>,
}

/// Packs named binary32 tensors, narrowing each element with RNE.
pub fn workspace_pack<'a, I>(named: I) -> Result<Workspace>
where
    I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
{
    let mut links = Vec::new();
    let mut index = HashMap::new();
    let mut params16 = Vec::new();
    for (name, shape, data) in named {
        if index.insert(name.to_string(), links.len()).is_some() {
            return Err(Error::DuplicateName(name.to_string()));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` shape {shape:?} vs {} values",
                data.len()
            )));
        }
        links.push(Link {
            name: name.to_string(),
            offset: params16.len(),
            len: data.len(),
            shape: shape.to_vec(),
        });
        params16.extend(data.iter().map(|&x| b32_to_b16(x)));
    }
    let n = params16.len();
    Ok(Workspace {
        params16,
        grads16: vec![Half::ZERO; n],
        m: Vec::new(),
        v: Vec::new(),
        step: 0,
        links,
        index,
    })
}

impl Workspace {
    /// Packs every parameter of `params` in layout order.
    pub fn from_params(params: &FlatParams<f32>) -> Result<Self> {
        let layout = params.layout().clone();
        workspace_pack((0..layout.count()).map(|id| {
            (
                layout.name(id),
                layout.spec(id).shape.as_slice(),
                params.get(id),
            )
        }))
    }

    /// Rebuilds a workspace from stored binary16 bit patterns.
    pub fn from_raw(links: Vec<Link>, params16: Vec<Half>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut offset = 0;
        for (i, l) in links.iter().enumerate() {
            if l.offset != offset || l.shape.iter().product::<usize>() != l.len {
                return Err(Error::ShapeMismatch(format!(
                    "link `{}` is not gapless or mis-shaped",
                    l.name
                )));
            }
            if index.insert(l.name.clone(), i).is_some() {
                return Err(Error::DuplicateName(l.name.clone()));
            }
            offset += l.len;
        }
        if offset != params16.len() {
            return Err(Error::ShapeMismatch("links do not cover the buffer".into()));
        }
        Ok(Workspace {
            grads16: vec![Half::ZERO; offset],
            params16,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            links,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.params16.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params16.is_empty()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn resolve(&self, name: &str) -> Result<Range<usize>> {
        self.index
            .get(name)
            .map(|&i| self.links[i].range())
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn param(&self, name: &str) -> Result<&[Half]> {
        Ok(&self.params16[self.resolve(name)?])
    }

    pub fn grad(&self, name: &str) -> Result<&[Half]> {
        Ok(&self.grads16[self.resolve(name)?])
    }

    /// Parameters widened to binary32, one vector per link.
    pub fn widened_params(&self) -> Vec<Vec<f32>> {
        self.links
            .iter()
            .map(|l| {
                self.params16[l.range()]
                    .iter()
                    .map(|&h| b16_to_b32(h))
                    .collect()
            })
            .collect()
    }

    /// Sets every gradient to `+0.0`.
    pub fn zero_grads(&mut self) {
        par::for_each_row(&mut self.grads16, CHUNK, |_, g| g.fill(Half::ZERO));
    }
}

/// Read-only parameter half of a [`Workspace`].
pub struct ParamsView<'a> {
    params16: &'a [Half],
    links: &'a [Link],
}

/// Writable gradient half of a [`Workspace`].
pub struct GradsView<'a> {
    grads16: &'a mut [Half],
    links: &'a [Link],
}

impl Workspace {
    /// Borrows parameters and gradients separately, so one pass can read
    /// the former while accumulating into the latter.
    pub fn split(&mut self) -> (ParamsView<'_>, GradsView<'_>) {
        (
            ParamsView {
                params16: &self.params16,
                links: &self.links,
            },
            GradsView {
                grads16: &mut self.grads16,
                links: &self.links,
            },
        )
    }
}

fn widen_into(src: &[Half], out: &mut [f32]) {
    out.iter_mut()
        .zip(src)
        .for_each(|(o, &h)| *o = b16_to_b32(h));
}

fn add_narrow(dst: &mut [Half], grad: &[f32]) {
    debug_assert_eq!(dst.len(), grad.len());
    dst.iter_mut()
        .zip(grad)
        .for_each(|(d, &g)| *d = b32_to_b16(b16_to_b32(*d) + g));
}

impl ParamSource<f32> for ParamsView<'_> {
    fn read_into(&self, id: ParamId, out: &mut [f32]) {
        widen_into(&self.params16[self.links[id].range()], out);
    }
}

impl GradSink<f32> for GradsView<'_> {
    fn accumulate(&mut self, id: ParamId, grad: &[f32]) {
        add_narrow(&mut self.grads16[self.links[id].range()], grad);
    }
}

/// Element range handled by one task in whole-workspace passes.
pub(crate) const CHUNK: usize = 4096;

impl ParamSource<f32> for Workspace {
    fn read_into(&self, id: ParamId, out: &mut [f32]) {
        widen_into(&self.params16[self.links[id].range()], out);
    }
}

/// Gradients are widened, added and narrowed back, so a parameter that
/// receives exactly one contribution per step stores `narrow(g)`.
impl GradSink<f32> for Workspace {
    fn accumulate(&mut self, id: ParamId, grad: &[f32]) {
        add_narrow(&mut self.grads16[self.links[id].range()], grad);
    }
}
