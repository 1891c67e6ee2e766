//! Binary checkpoints of named parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"MVCRCKPT"
//! u32    format version
//! u8     element type tag (4 = f32, 8 = f64)
//! u64    run seed
//! u32    config length, then the config text (UTF-8)
//! u32    tensor count, then per tensor, sorted by name:
//!          u32 name length, name, u8 group, u32 rank, u64 × rank dims,
//!          numel elements of the stored type
//! ```
//!
//! Values are held as `f64` in memory; widening f32 → f64 is exact, so a
//! checkpoint re-encoded at its stored type is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Group, ParamStore};
use crate::tensor::{ElemType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MVCRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub elem: ElemType,
    pub seed: u64,
    /// Echo of the config that produced the parameters.
    pub config: String,
    /// Sorted by name.
    pub tensors: Vec<NamedTensor>,
}

fn group_tag(g: Group) -> u8 {
    match g {
        Group::Backbone => 0,
        Group::Head => 1,
        Group::Hae => 2,
    }
}

fn group_from_tag(t: u8) -> Option<Group> {
    Group::ALL.into_iter().find(|&g| group_tag(g) == t)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CheckpointFormat(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CheckpointFormat(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, seed: u64, config: impl Into<String>) -> Self {
        let mut tensors: Vec<NamedTensor> = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64_vec(),
            })
            .collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Self { elem: T::ELEM, seed, config: config.into(), tensors }
    }

    /// Copies every tensor into the same-named parameter of `store`. The
    /// names must match exactly and shapes must agree.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store
                .id_of(&t.name)
                .ok_or_else(|| Error::CheckpointFormat(format!("model has no parameter `{}`", t.name)))?;
            if store.value(id).shape() != t.shape.as_slice() {
                return Err(Error::shape("checkpoint load", store.value(id).shape(), &t.shape));
            }
            *store.value_mut(id) = Tensor::from_f64(t.shape.clone(), &t.data)?;
        }
        Ok(())
    }

    pub fn count(&self, group: Group) -> usize {
        self.tensors.iter().filter(|t| t.group == group).map(|t| t.data.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// The same values stored at another precision.
    pub fn with_elem(&self, elem: ElemType) -> Self {
        let mut out = self.clone();
        out.elem = elem;
        if elem == ElemType::F32 {
            for t in &mut out.tensors {
                for v in &mut t.data {
                    *v = *v as f32 as f64;
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.elem.tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        let mut sorted: Vec<&NamedTensor> = self.tensors.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
        for t in sorted {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(group_tag(t.group));
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                match self.elem {
                    ElemType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    ElemType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
        }
        let tag = r.u8("element type")?;
        let elem = ElemType::from_tag(tag).ok_or_else(|| Error::CheckpointFormat(format!("element tag {tag}")))?;
        let seed = r.u64("seed")?;
        let config = r.string("config")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let g = r.u8("group")?;
            let group = group_from_tag(g).ok_or_else(|| Error::CheckpointFormat(format!("group tag {g}")))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::CheckpointFormat(format!("`{name}` shape overflows")))?;
            let raw = r.take(
                numel.checked_mul(elem.size()).ok_or_else(|| Error::CheckpointFormat(format!("`{name}` too large")))?,
                "tensor data",
            )?;
            let data = match elem {
                ElemType::F32 => {
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
                }
                ElemType::F64 => {
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
                }
            };
            if let Some(prev) = tensors.last().map(|t: &NamedTensor| t.name.as_str()) {
                if prev >= name.as_str() {
                    return Err(Error::CheckpointFormat(format!("tensor `{name}` out of order")));
                }
            }
            tensors.push(NamedTensor { name, group, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { elem, seed, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })
    }
}
