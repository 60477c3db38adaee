//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "M4CK" | version u32 | count u32
//! count x { name_len u16 | name utf-8 | rank u8 | extents u64 x rank | payload f64 x numel }
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"M4CK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint has parameter {0} unknown to the model")]
    Unknown(String),
}

impl CheckpointError {
    /// Stable numeric code, reported by the CLI alongside the message.
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::Io(_) => 100,
            CheckpointError::BadMagic => 101,
            CheckpointError::UnsupportedVersion(_) => 102,
            CheckpointError::Truncated => 103,
            CheckpointError::TrailingBytes(_) => 104,
            CheckpointError::Malformed(_) => 105,
            CheckpointError::ShapeMismatch { .. } => 106,
            CheckpointError::Missing(_) => 107,
            CheckpointError::Unknown(_) => 108,
        }
    }
}

pub fn encode(records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(if MAGIC.starts_with(buf) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u64()?;
            if e == 0 || e > u32::MAX as u64 {
                return Err(CheckpointError::Malformed(format!("{name}: extent {e}")));
            }
            shape.push(e as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
        let bytes = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Malformed(format!("{name}: non-finite value")));
        }
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let records: Vec<(&str, &Tensor)> = store.ids().map(|id| (store.name(id), store.value(id))).collect();
    fs::write(path, encode(&records))?;
    Ok(())
}

/// Overwrites every parameter of `store` from the checkpoint at `path`. The
/// checkpoint must hold exactly the store's parameters with matching shapes;
/// on error `store` is left untouched.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let records = decode(&fs::read(path)?)?;
    restore(store, records)
}

pub fn restore(store: &mut ParamStore, records: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    let mut staged = Vec::with_capacity(records.len());
    for (name, t) in records {
        let id = store
            .find(&name)
            .ok_or_else(|| CheckpointError::Unknown(name.clone()))?;
        if store.value(id).shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: store.value(id).shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        staged.push((id, t));
    }
    if staged.len() != store.len() {
        let have: Vec<_> = staged.iter().map(|(id, _)| *id).collect();
        let missing = store.ids().find(|id| !have.contains(id)).unwrap();
        return Err(CheckpointError::Missing(store.name(missing).to_string()));
    }
    for (id, t) in staged {
        *store.value_mut(id) = t;
    }
    Ok(())
}
