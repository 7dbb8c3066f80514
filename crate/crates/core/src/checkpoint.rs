//! Named-tensor checkpoint file.
//!
//! ```text
//! "PARF"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!           u8 rank, rank × u64 extent, u64 offset }
//! payloads, little-endian, at the recorded offsets
//! ```
//!
//! All integers are little-endian. Offsets are absolute file positions;
//! payloads are written back to back in record order, so offsets strictly
//! increase and never overlap.

use std::collections::BTreeMap;
use std::path::Path;

use crate::arch::ModuleGraph;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"PARF";
pub const VERSION: u32 = 1;

/// A tensor of either stored dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => f32::write_le(t.data(), out),
            StoredTensor::F64(t) => f64::write_le(t.data(), out),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode<T: Element>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    Tensor::new(shape, T::read_le(bytes))
}

impl Checkpoint {
    /// Every stored tensor of a graph, running statistics included.
    pub fn from_graph<T: Element>(graph: &ModuleGraph<T>) -> Self {
        let tensors = graph
            .named_tensors()
            .into_iter()
            .map(|(k, t)| (k, StoredTensor::from_tensor(t)))
            .collect();
        Checkpoint { tensors }
    }

    /// Load into a graph of matching structure, converting dtype if needed.
    pub fn apply_to<T: Element>(&self, graph: &mut ModuleGraph<T>) -> Result<()> {
        let map = self.tensors.iter().map(|(k, v)| (k.clone(), v.to::<T>())).collect();
        graph.load_named(&map)
    }

    /// True when the checkpoint holds no batch-norm running statistics.
    pub fn is_folded(&self) -> bool {
        !self.tensors.keys().any(|k| k.ends_with(".running_mean"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header_len: usize = 12
            + self
                .tensors
                .iter()
                .map(|(k, t)| 4 + k.len() + 2 + 8 * t.shape().len() + 8)
                .sum::<usize>();
        let mut out = Vec::with_capacity(header_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.shape().iter().product::<usize>() * t.dtype().size()) as u64;
        }
        debug_assert_eq!(out.len(), header_len);
        for t in self.tensors.values() {
            t.write_payload(&mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a PARF file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: dtype tag {tag}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            records.push((name, dtype, shape, offset));
        }
        let mut tensors = BTreeMap::new();
        let mut next = r.pos as u64;
        for (name, dtype, shape, offset) in records {
            let bytes = shape
                .iter()
                .try_fold(dtype.size(), |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
            if offset < next {
                return Err(Error::Checkpoint(format!("{name}: offset {offset} overlaps previous data (next free {next})")));
            }
            let start = offset as usize;
            let end = start
                .checked_add(bytes)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| Error::Checkpoint(format!("{name}: payload runs past end of file")))?;
            let payload = &buf[start..end];
            let t = match dtype {
                DType::F32 => StoredTensor::F32(decode(shape, payload)?),
                DType::F64 => StoredTensor::F64(decode(shape, payload)?),
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            next = end as u64;
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
