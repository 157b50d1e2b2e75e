//! Binary checkpoints: named parameter tensors, a hash of the architecture
//! settings and the step counter.
//!
//! Layout (little endian): magic, `u32` version, 8-byte config hash, `u64`
//! step, `u32` tensor count, then per tensor a `u32`-prefixed UTF-8 name, a
//! `u32` rank, `u64` extents and `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::GanConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::Model;

const MAGIC: &[u8; 8] = b"ALRGANCK";
const VERSION: u32 = 1;

/// First eight bytes of the SHA-256 of the architecture key.
pub fn config_hash(cfg: &GanConfig) -> [u8; 8] {
    let digest = Sha256::digest(cfg.architecture_key().as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub fn encode(model: &Model, step: u64) -> Vec<u8> {
    let store = &model.store;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(&model.cfg));
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
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
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds `cfg`'s model and loads the stored parameters into it; returns
/// the model and the step counter.
pub fn decode(bytes: &[u8], cfg: &GanConfig) -> Result<(Model, u64)> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    if r.take(8)? != config_hash(cfg) {
        return Err(Error::Checkpoint(
            "config hash mismatch: the checkpoint was written for a different architecture".into(),
        ));
    }
    let step = r.u64()?;
    let mut model = Model::new(cfg)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.store.get(id).shape() {
            return Err(Error::Checkpoint(format!("tensor {name:?} has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let data = r.take(n * 8)?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.store.set(id, Tensor::new(shape, values)?)?;
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, step))
}

pub fn save(path: &Path, model: &Model, step: u64) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model, step))?;
    Ok(())
}

pub fn load(path: &Path, cfg: &GanConfig) -> Result<(Model, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, cfg)
}
