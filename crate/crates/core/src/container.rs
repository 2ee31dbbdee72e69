//! Self-describing little-endian tensor file.
//!
//! Layout: `"DFFT"`, version `u32`, tensor count `u32`, then per tensor the
//! name length `u16`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64, 2 = u32,
//! 3 = u8), rank `u8`, each dim as `u32`, and the raw payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFFT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Self::F32(_) => 0,
            Self::F64(_) => 1,
            Self::U32(_) => 2,
            Self::U8(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: Vec<NamedTensor>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: TensorData) -> Result<()> {
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(err(format!("tensor {name}: dims {dims:?} hold {count} values, payload has {}", data.len())));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(err(format!("tensor {name} exceeds format limits")));
        }
        if self.get(name).is_some() {
            return Err(err(format!("duplicate tensor name {name}")));
        }
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
        self.push(name, dims, TensorData::F64(data.to_vec()))
    }

    pub fn push_u32(&mut self, name: &str, dims: &[usize], data: &[u32]) -> Result<()> {
        self.push(name, dims, TensorData::U32(data.to_vec()))
    }

    pub fn push_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.push(name, &[text.len()], TensorData::U8(text.as_bytes().to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| err(format!("missing tensor {name}")))
    }

    /// f64 payload and dims; f32 payloads are widened.
    pub fn f64s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::F64(v) => Ok((t.dims.clone(), v.clone())),
            TensorData::F32(v) => Ok((t.dims.clone(), v.iter().map(|&x| x as f64).collect())),
            _ => Err(err(format!("tensor {name} is not floating point"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::U32(v) => Ok((t.dims.clone(), v.clone())),
            _ => Err(err(format!("tensor {name} is not u32"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::U8(v) => String::from_utf8(v.clone()).map_err(|_| err(format!("tensor {name} is not UTF-8"))),
            _ => Err(err(format!("tensor {name} is not a byte string"))),
        }
    }

    /// Single f64 value stored as a rank-0 tensor.
    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (_, v) = self.f64s(name)?;
        v.first().copied().filter(|_| v.len() == 1).ok_or_else(|| err(format!("tensor {name} is not a scalar")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut c = Self::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| err("tensor name is not UTF-8"))?.to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| err(format!("tensor {name}: size overflow")))?;
            let width = match dtype {
                0 | 2 => 4,
                1 => 8,
                3 => 1,
                other => return Err(err(format!("tensor {name}: unknown dtype {other}"))),
            };
            let bytes = r.take(n.checked_mul(width).ok_or_else(|| err("size overflow"))?)?;
            let data = match dtype {
                0 => TensorData::F32(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => TensorData::F64(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
                2 => TensorData::U32(bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()),
                _ => TensorData::U8(bytes.to_vec()),
            };
            c.push(&name, &dims, data)?;
        }
        if r.pos != buf.len() {
            return Err(err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let mut c = TensorContainer::new();
        c.push_u32("ab", &[2], &[1, 258]).unwrap();
        let b = c.to_bytes();
        let mut want = b"DFFT".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 2, 1, 2, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, 0, 0, 2, 1, 0, 0]);
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_malformed_input() {
        let mut c = TensorContainer::new();
        assert!(c.push_f64("x", &[3], &[1.0, 2.0]).is_err());
        c.push_f64("x", &[2], &[1.0, 2.0]).unwrap();
        assert!(c.push_f64("x", &[1], &[1.0]).is_err());
        let b = c.to_bytes();
        assert!(TensorContainer::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(TensorContainer::from_bytes(&extra).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(TensorContainer::from_bytes(&bad).is_err());
        assert!(c.u32s("x").is_err());
        assert!(c.f64s("y").is_err());
    }
}
