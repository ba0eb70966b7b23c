//! Chunked binary container used for videos, mask stacks and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "LVSGARC\0"
//! version   u32       1
//! count     u32       number of chunks
//! chunk*    repeated `count` times:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   dtype     u8      1=f32 2=f64 3=u8 4=u64 5=utf8 text
//!   ndim      u8
//!   dims      ndim x u64
//!   payload   product(dims) elements, row-major (text: dims=[byte_len])
//! ```
//!
//! Floats are stored by bit pattern, so a write/read cycle is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LVSGARC\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
    Text(String),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
            ArrayData::U8(_) => 3,
            ArrayData::U64(_) => 4,
            ArrayData::Text(_) => 5,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::Text(s) => s.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    chunks: Vec<Chunk>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: ArrayData) -> Result<()> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Format(format!(
                "chunk dims {:?} imply {} elements, payload has {}",
                dims,
                numel,
                data.len()
            )));
        }
        self.chunks.push(Chunk {
            name: name.into(),
            dims,
            data,
        });
        Ok(())
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        let text = text.into();
        let len = text.len();
        self.chunks.push(Chunk {
            name: name.into(),
            dims: vec![len],
            data: ArrayData::Text(text),
        });
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn get(&self, name: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.name == name)
    }

    fn require(&self, name: &str) -> Result<&Chunk> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing chunk `{name}`")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match &self.require(name)?.data {
            ArrayData::Text(s) => Ok(s),
            _ => Err(Error::Format(format!("chunk `{name}` is not text"))),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let c = self.require(name)?;
        match &c.data {
            ArrayData::F32(v) => Ok((&c.dims, v)),
            _ => Err(Error::Format(format!("chunk `{name}` is not f32"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let c = self.require(name)?;
        match &c.data {
            ArrayData::F64(v) => Ok((&c.dims, v)),
            _ => Err(Error::Format(format!("chunk `{name}` is not f64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let c = self.require(name)?;
        match &c.data {
            ArrayData::U8(v) => Ok((&c.dims, v)),
            _ => Err(Error::Format(format!("chunk `{name}` is not u8"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<(&[usize], &[u64])> {
        let c = self.require(name)?;
        match &c.data {
            ArrayData::U64(v) => Ok((&c.dims, v)),
            _ => Err(Error::Format(format!("chunk `{name}` is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            out.extend_from_slice(&(c.name.len() as u32).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            out.push(c.data.dtype());
            out.push(c.dims.len() as u8);
            for &d in &c.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &c.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut chunks = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("chunk name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let data = match dtype {
                1 => ArrayData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                3 => ArrayData::U8(r.take(n)?.to_vec()),
                4 => ArrayData::U64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                5 => ArrayData::Text(
                    String::from_utf8(r.take(n)?.to_vec())
                        .map_err(|_| Error::Format(format!("chunk `{name}` is not UTF-8")))?,
                ),
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            chunks.push(Chunk { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last chunk".into()));
        }
        Ok(Self { chunks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
