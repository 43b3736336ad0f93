//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XFMR1"                      magic
//! [u8; 32]                     SHA-256 of the canonical config text
//! u32                          tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 extents
//!   numel x f64 payload
//! ```

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::config::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"XFMR1";

pub fn encode_checkpoint(config: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * store.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&config.digest());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.value.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors of a checkpoint written for `config`.
pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if r.take(32)? != config.digest() {
        return Err(Error::Checkpoint(format!("written for a different config than {}", config.name)));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&m| m <= (bytes.len() - r.pos) / 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} extents {shape:?} exceed the file")))?;
        let data = r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}
