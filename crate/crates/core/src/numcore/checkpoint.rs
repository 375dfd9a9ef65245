//! Binary checkpoint format.
//!
//! ```text
//! "UNTS" | version u32 | entry count u32 | entries...
//! | momentum count u32 | momentum entries... | step_count u64
//! entry = name_len u16 | utf-8 name | rank u8 | dims u32 * rank | values f64 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Momentum entries use the
//! entry layout and must list the same names, in the same order, with the
//! same shapes as the parameter entries.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"UNTS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("unsupported version {found} at byte {offset}")]
    BadVersion { found: u32, offset: usize },
    #[error("unexpected end of data at byte {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("cannot encode parameter {name:?}: {reason}")]
    Encode { name: String, reason: String },
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(params: &ParamSet) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, e) in params.iter() {
        write_entry(&mut out, name, &e.value)?;
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, e) in params.iter() {
        write_entry(&mut out, name, &e.velocity)?;
    }
    out.extend_from_slice(&params.step_count().to_le_bytes());
    Ok(out)
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<(), CheckpointError> {
    let err = |reason: &str| CheckpointError::Encode {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let len = u16::try_from(name.len()).map_err(|_| err("name longer than 65535 bytes"))?;
    let rank = u8::try_from(t.shape().len()).map_err(|_| err("rank above 255"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| err("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn malformed(&self, at: usize, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            offset: at,
            reason: reason.into(),
        }
    }

    fn entry(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let start = self.pos;
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.malformed(start + 2, "name is not utf-8"))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some())
            .ok_or_else(|| self.malformed(start, "tensor size overflows"))?;
        let values_at = self.pos;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| self.malformed(values_at, e.to_string()))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            found: version,
            offset: 4,
        });
    }
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        values.push(r.entry()?);
    }
    let momentum_at = r.pos;
    let momentum_count = r.u32()? as usize;
    if momentum_count != count {
        return Err(r.malformed(
            momentum_at,
            format!("momentum count {momentum_count} differs from entry count {count}"),
        ));
    }
    let mut params = ParamSet::new();
    for (name, value) in values {
        let at = r.pos;
        let (vname, velocity) = r.entry()?;
        if vname != name {
            return Err(r.malformed(at, format!("momentum entry {vname:?} does not match {name:?}")));
        }
        params
            .insert_with_state(name, value, velocity)
            .map_err(|e| r.malformed(at, e.to_string()))?;
    }
    params.set_step_count(r.u64()?);
    if r.pos != bytes.len() {
        return Err(r.malformed(r.pos, "trailing bytes"));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(params)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
