//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MCLRCKPT"
//! version  u32      1
//! payload:
//!   arch_id  u32 length + UTF-8 bytes
//!   iter     u64
//!   count    u32
//!   count × { name: u32 length + UTF-8 bytes, shape: 4 × u32 (n,c,h,w), data: n·c·h·w × f64 }
//! crc32    u32      CRC-32 (IEEE) of the payload bytes
//! ```

use std::path::Path;

use thiserror::Error;

use crate::nets::ParamSet;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"MCLRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub iter: u64,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(params: &ParamSet, iter: u64) -> Vec<u8> {
    let mut payload = Vec::with_capacity(64 + params.numel() * 8);
    put_str(&mut payload, params.arch_id());
    payload.extend_from_slice(&iter.to_le_bytes());
    payload.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.entries() {
        put_str(&mut payload, name);
        for d in t.shape().dims() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let payload = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());

    // Parse first so a cut-off file reports truncation rather than a CRC error.
    let mut r = Reader { buf: payload, pos: 0 };
    let parsed = (|| -> Result<Checkpoint> {
        let arch = r.string()?;
        let iter = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let bytes = dims
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let raw = r.take(bytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::from_vec(shape, data).unwrap()));
        }
        let params = ParamSet::new(arch, entries)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Checkpoint { params, iter })
    })();

    let computed = crc32fast::hash(payload);
    match parsed {
        Ok(ck) if computed == stored && r.pos == payload.len() => Ok(ck),
        Ok(_) if computed != stored => Err(CheckpointError::Crc { stored, computed }),
        Ok(_) => Err(CheckpointError::Malformed("trailing bytes".into())),
        Err(CheckpointError::Truncated) if computed == stored => {
            Err(CheckpointError::Malformed("inconsistent lengths".into()))
        }
        Err(CheckpointError::Truncated) => Err(CheckpointError::Truncated),
        Err(_) if computed != stored => Err(CheckpointError::Crc { stored, computed }),
        Err(e) => Err(e),
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet, iter: u64) -> Result<()> {
    std::fs::write(path, encode(params, iter))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
