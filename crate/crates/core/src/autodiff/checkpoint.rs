//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FCK1" | u32 param_count
//! per param: u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FCK1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint hash mismatch")]
    HashMismatch,
    #[error("checkpoint truncated or malformed")]
    Corrupt,
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.n_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 trailer of an encoded checkpoint.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    let tail = &bytes[bytes.len().saturating_sub(32)..];
    tail.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Corrupt)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Corrupt)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint into `(name, tensor)` pairs after verifying its hash.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if bytes.len() < 4 + 4 + 32 {
        return Err(if bytes.starts_with(MAGIC) || bytes.len() < 4 {
            CheckpointError::Corrupt
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::HashMismatch);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CheckpointError::Corrupt)?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Corrupt)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| CheckpointError::Corrupt)?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt);
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `bytes`; names and shapes must match exactly.
pub fn apply_checkpoint(store: &mut ParamStore, bytes: &[u8]) -> Result<(), CheckpointError> {
    let entries = decode_checkpoint(bytes)?;
    let mut seen = vec![false; store.len()];
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| CheckpointError::UnexpectedParam(name.clone()))?;
        let expected = store.value(id).shape().to_vec();
        if expected != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: t.shape().to_vec(),
            });
        }
        *store.value_mut(id) = t;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = store.ids().nth(i).expect("index in range");
        return Err(CheckpointError::MissingParam(store.name(id).to_string()));
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<String, CheckpointError> {
    let bytes = encode_checkpoint(store);
    std::fs::write(path, &bytes)?;
    Ok(checkpoint_hash(&bytes))
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path)?;
    apply_checkpoint(store, &bytes)
}
