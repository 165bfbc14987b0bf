use std::path::Path;

use ndarray::Array2;

use super::{DspConfig, LogMelFeature};
use crate::dataset::CycleRef;
use crate::error::{Error, Result};

pub const FEATURE_CACHE_MAGIC: &[u8; 8] = b"RESPEXFC";
const VERSION: u32 = 1;

/// Layout: magic, u32 version, u32 hash length, hash bytes, u64 record count, then
/// per record a u32-length JSON provenance, u32 rows, u32 cols and row-major f32
/// values. Integers are little-endian. The file is replaced atomically.
pub fn write_feature_cache(path: &Path, hash: &str, features: &[LogMelFeature]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_CACHE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    out.extend_from_slice(hash.as_bytes());
    out.extend_from_slice(&(features.len() as u64).to_le_bytes());
    for f in features {
        let meta = serde_json::to_vec(&f.source).map_err(|e| Error::Cache(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let (r, c) = f.values.dim();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in f.values.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &out)
}

/// `Ok(None)` when the file is absent or was written for a different hash.
pub fn read_feature_cache(path: &Path, hash: &str, config: &DspConfig) -> Result<Option<Vec<LogMelFeature>>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != FEATURE_CACHE_MAGIC {
        return Err(Error::Cache(format!("{} is not a feature cache", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Cache(format!("unsupported cache version {version}")));
    }
    let hlen = r.u32()? as usize;
    if r.take(hlen)? != hash.as_bytes() {
        return Ok(None);
    }
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let mlen = r.u32()? as usize;
        let source: CycleRef = serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Cache(e.to_string()))?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let values = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Cache(e.to_string()))?;
        out.push(LogMelFeature { values, config: config.clone(), source });
    }
    if r.pos != bytes.len() {
        return Err(Error::Cache("trailing bytes".into()));
    }
    Ok(Some(out))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Cache("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
