//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HGMB"  version:u32  count:u32
//! count × { name_len:u32  name:[u8]  dtype:u8  rank:u32  extents:[u64; rank]  values }
//! ```
//!
//! `dtype` 1 is `f64` (8 bytes per value), 2 is raw bytes (UTF-8 text for metadata).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::NDArray;

pub const MAGIC: &[u8; 4] = b"HGMB";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_BYTES: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F64(NDArray),
    Bytes(Vec<u8>),
}

/// Ordered named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push_array(&mut self, name: impl Into<String>, value: NDArray) {
        self.records.push((name.into(), Tensor::F64(value)));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.records.push((name.into(), Tensor::Bytes(text.as_bytes().to_vec())));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|r| r.0 == name).map(|r| &r.1)
    }

    pub fn array(&self, name: &str) -> Result<&NDArray> {
        match self.get(name) {
            Some(Tensor::F64(a)) => Ok(a),
            Some(Tensor::Bytes(_)) => Err(Error::Checkpoint(format!("record {name} is not numeric"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Tensor::Bytes(b)) => {
                std::str::from_utf8(b).map_err(|_| Error::Checkpoint(format!("record {name} is not UTF-8")))
            }
            Some(Tensor::F64(_)) => Err(Error::Checkpoint(format!("record {name} is not text"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, tensor) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match tensor {
                Tensor::F64(a) => {
                    out.push(DTYPE_F64);
                    out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
                    for &e in a.shape() {
                        out.extend_from_slice(&(e as u64).to_le_bytes());
                    }
                    for v in a.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::Bytes(b) => {
                    out.push(DTYPE_BYTES);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadCheckpointHeader);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("record {name}: extents overflow")))?;
            let tensor = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::F64(NDArray::new(shape, data)?)
                }
                DTYPE_BYTES if rank == 1 => Tensor::Bytes(r.take(n)?.to_vec()),
                other => return Err(Error::Checkpoint(format!("record {name}: unknown dtype {other}"))),
            };
            records.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
