//! Versioned binary checkpoint: magic, version, JSON descriptor, raw f64 tensors.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, ModelState, NamedTensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RESPEXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: ModelSpec,
    seed: u64,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let desc = Descriptor {
        spec: state.spec.clone(),
        seed: state.seed,
        params: state.params.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
        buffers: state.buffers.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
    };
    let header = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in state.params.iter().chain(&state.buffers) {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u64(&mut r)? as usize;
    if r.len() < len {
        return Err(Error::Checkpoint("truncated descriptor".into()));
    }
    let desc: Descriptor = serde_json::from_slice(&r[..len])
        .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
    r = &r[len..];
    let mut take = |entries: &[(String, Vec<usize>)]| -> Result<Vec<NamedTensor>> {
        entries
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                if r.len() < n * 8 {
                    return Err(Error::Checkpoint(format!("truncated tensor {name}")));
                }
                let data = r[..n * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                r = &r[n * 8..];
                Ok(NamedTensor { name: name.clone(), shape: shape.clone(), data })
            })
            .collect()
    };
    let params = take(&desc.params)?;
    let buffers = take(&desc.buffers)?;
    ModelState::from_parts(desc.spec, desc.seed, params, buffers)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

