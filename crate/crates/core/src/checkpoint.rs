//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `LSF2`, version `u32`, step `u64`, tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, dtype `u8`
//! (0 binary32, 1 binary16), rank `u8`, dims as `u64`, raw elements.
//! Parameters are stored as binary16 bit patterns under their own names;
//! optimizer moments as binary32 under `opt.m/<name>` and `opt.v/<name>`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Half;
use crate::trainer::{Link, Workspace};

pub const MAGIC: &[u8; 4] = b"LSF2";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F16(Vec<Half>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F16(_) => 1,
        }
    }

    /// Values widened to binary64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F16(v) => v.iter().map(|h| h.to_f32() as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<StoredTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| corrupt(format!("truncated: {e}")))?;
    Ok(b)
}

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";

impl Checkpoint {
    pub fn from_workspace(ws: &Workspace) -> Self {
        let mut tensors = Vec::new();
        for l in ws.links() {
            tensors.push(StoredTensor {
                name: l.name.clone(),
                shape: l.shape.clone(),
                data: Payload::F16(ws.params16[l.range()].to_vec()),
            });
        }
        for (prefix, buf) in [(M_PREFIX, &ws.m), (V_PREFIX, &ws.v)] {
            if buf.is_empty() {
                continue;
            }
            for l in ws.links() {
                tensors.push(StoredTensor {
                    name: format!("{prefix}{}", l.name),
                    shape: l.shape.clone(),
                    data: Payload::F32(buf[l.range()].to_vec()),
                });
            }
        }
        Self {
            step: ws.step,
            tensors,
        }
    }

    /// Rebuilds the workspace; gradients start at zero.
    pub fn to_workspace(&self) -> Result<Workspace> {
        let mut links = Vec::new();
        let mut params = Vec::new();
        let mut moments: [Vec<(String, &Vec<f32>)>; 2] = [Vec::new(), Vec::new()];
        for t in &self.tensors {
            match (
                &t.data,
                t.name.strip_prefix(M_PREFIX),
                t.name.strip_prefix(V_PREFIX),
            ) {
                (Payload::F32(v), Some(n), _) => moments[0].push((n.to_string(), v)),
                (Payload::F32(v), _, Some(n)) => moments[1].push((n.to_string(), v)),
                (Payload::F16(v), None, None) => {
                    links.push(Link {
                        name: t.name.clone(),
                        offset: params.len(),
                        len: v.len(),
                        shape: t.shape.clone(),
                    });
                    params.extend_from_slice(v);
                }
                _ => return Err(corrupt(format!("unexpected tensor `{}`", t.name))),
            }
        }
        let mut ws = Workspace::from_raw(links, params)?;
        for (k, list) in moments.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let mut buf = vec![0.0f32; ws.len()];
            if list.len() != ws.links().len() {
                return Err(corrupt("moment tensors do not cover every parameter"));
            }
            for (name, v) in list {
                let r = ws.resolve(name)?;
                if r.len() != v.len() {
                    return Err(corrupt(format!("moment `{name}` has {} values", v.len())));
                }
                buf[r].copy_from_slice(v);
            }
            if k == 0 {
                ws.m = buf;
            } else {
                ws.v = buf;
            }
        }
        ws.step = self.step;
        Ok(ws)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            if t.shape.len() > u8::MAX as usize || t.shape.iter().product::<usize>() != t.data.len()
            {
                return Err(corrupt(format!("tensor `{}` shape {:?}", t.name, t.shape)));
            }
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.data.dtype_tag(), t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            match &t.data {
                Payload::F32(v) => v
                    .iter()
                    .for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
                Payload::F16(v) => v
                    .iter()
                    .for_each(|h| bytes.extend_from_slice(&h.to_bits().to_le_bytes())),
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(read_exact(r)?);
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)
                .map_err(|_| corrupt("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("name is not UTF-8"))?;
            let [dtype, rank] = read_exact::<2>(r)?;
            let shape: Vec<usize> = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
                .collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let width = match dtype {
                0 => 4,
                1 => 2,
                t => return Err(corrupt(format!("unknown dtype tag {t}"))),
            };
            let mut raw = vec![0u8; len * width];
            r.read_exact(&mut raw)
                .map_err(|_| corrupt(format!("truncated data for `{name}`")))?;
            let data = if dtype == 0 {
                Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            } else {
                Payload::F16(
                    raw.chunks_exact(2)
                        .map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]])))
                        .collect(),
                )
            };
            tensors.push(StoredTensor { name, shape, data });
        }
        Ok(Self { step, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{optimizer_step, workspace_pack, OptimConfig};

    fn sample() -> Workspace {
        let a: Vec<f32> = (0..6).map(|i| i as f32 * 0.3 - 1.0).collect();
        let b = [0.25f32, -7.5];
        let mut ws =
            workspace_pack([("a", &[2usize, 3][..], &a[..]), ("b", &[2][..], &b[..])]).unwrap();
        ws.grads16
            .iter_mut()
            .enumerate()
            .for_each(|(i, g)| *g = Half::from_f32(i as f32 * 0.01));
        optimizer_step(&mut ws, &OptimConfig::adam(0.01)).unwrap();
        ws
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ws = sample();
        let mut bytes = Vec::new();
        Checkpoint::from_workspace(&ws)
            .write_to(&mut bytes)
            .unwrap();
        assert_eq!(&bytes[..4], b"LSF2");
        let back = Checkpoint::read_from(&mut bytes.as_slice())
            .unwrap()
            .to_workspace()
            .unwrap();
        assert_eq!(back.params16, ws.params16);
        assert_eq!(
            back.m.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            ws.m.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.v, ws.v);
        assert_eq!(back.step, 1);
        assert_eq!(back.links(), ws.links());
    }

    #[test]
    fn header_layout() {
        let ws = sample();
        let mut bytes = Vec::new();
        Checkpoint::from_workspace(&ws)
            .write_to(&mut bytes)
            .unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 6);
        // First tensor: name "a", binary16, rank 2, dims 2 and 3.
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(&bytes[24..27], &[b'a', 1, 2]);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(Checkpoint::read_from(&mut &b"LSF1"[..]).is_err());
        let mut bytes = Vec::new();
        Checkpoint::from_workspace(&sample())
            .write_to(&mut bytes)
            .unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
