//! Versioned binary container of named `f32` tensors.
//!
//! Layout (little-endian): magic `ARFSCKPT`, format version `u16`, component
//! tag (`u8` length + UTF-8), config block (`u32` length + UTF-8), tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u8`,
//! dims (`u32` each), dtype tag `u8` (0 = f32), payload. A 56-byte RNG
//! snapshot and a `u64` step counter follow, and a CRC32 of every preceding
//! byte closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamLayout;
use crate::rng::RngState;

pub const CKPT_MAGIC: &[u8; 8] = b"ARFSCKPT";
pub const CKPT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Ar,
    Bidir,
}

impl Component {
    fn tag(self) -> &'static str {
        match self {
            Component::Ar => "ar",
            Component::Bidir => "bidir",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let tag = self.component.tag();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expected: usize = t.dims.iter().map(|&d| d as usize).product();
            if expected != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor {} has {} values but dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format(format!("tensor {} rank too large", t.name)))?;
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.encode());
        out.extend_from_slice(&self.step.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("missing ARFSCKPT magic".into()));
        }
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let tag_len = r.u8()? as usize;
        let component = match r.take(tag_len)? {
            b"ar" => Component::Ar,
            b"bidir" => Component::Bidir,
            other => return Err(Error::Format(format!("unknown component tag {:?}", String::from_utf8_lossy(other)))),
        };
        let cfg_len = r.u32()? as usize;
        let config = r.string(cfg_len)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name} has unknown dtype tag {dtype}")));
            }
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let rng_bytes: &[u8; RngState::ENCODED_LEN] = r.take(RngState::ENCODED_LEN)?.try_into().unwrap();
        let rng = RngState::decode(rng_bytes);
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            component,
            config,
            tensors,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// One tensor per layout entry, named `{prefix}{entry}`.
pub fn layout_tensors(prefix: &str, layout: &ParamLayout, data: &[f32]) -> Vec<NamedTensor> {
    layout
        .entries()
        .iter()
        .map(|e| NamedTensor::new(format!("{prefix}{}", e.name), &e.shape, data[e.range()].to_vec()))
        .collect()
}

/// Inverse of [`layout_tensors`]: gathers a flat buffer, checking every shape.
pub fn read_layout(ckpt: &Checkpoint, prefix: &str, layout: &ParamLayout) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; layout.len()];
    for e in layout.entries() {
        let name = format!("{prefix}{}", e.name);
        let t = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        if dims != e.shape {
            return Err(Error::Format(format!("tensor {name} has shape {dims:?}, expected {:?}", e.shape)));
        }
        out[e.range()].copy_from_slice(&t.data);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
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
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
