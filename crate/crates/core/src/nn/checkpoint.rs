//! Flat little-endian parameter checkpoints.
//!
//! ```text
//! magic      8 bytes  "SJENCKPT"
//! version    u32      1
//! kind_len   u32, kind bytes (UTF-8 model identity)
//! meta_len   u32, meta bytes (UTF-8 JSON: architecture and STFT config)
//! count      u64      number of records
//! record*    name_len u32, name bytes, trainable u8, rank u32,
//!            dims u64 x rank, payload f64 x prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Param, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SJENCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in [&self.kind, &self.meta] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for d in &p.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = read_string(&mut r)?;
        let meta = read_string(&mut r)?;
        let count = read_u64(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > r.len() {
                return Err(Error::Checkpoint(format!("truncated payload for {name}")));
            }
            let data = (0..n)
                .map(|_| {
                    let mut b = [0u8; 8];
                    read_exact(&mut r, &mut b).map(|_| f64::from_le_bytes(b))
                })
                .collect::<Result<Vec<_>>>()?;
            params.insert(Param {
                name,
                shape,
                data,
                trainable: flag[0] != 0,
            })?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { kind, meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
