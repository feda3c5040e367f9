//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "PLCKPT01"
//! rows         u64 LE
//! cols         u64 LE
//! version_len  u32 LE, then the version tag (UTF-8)
//! map_len      u32 LE, then the feature map (JSON, UTF-8)
//! weights      rows * cols f64 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{FeatureMap, PolicyError, PolicyParams, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLCKPT01";

pub fn encode_checkpoint(params: &PolicyParams) -> Vec<u8> {
    let map = serde_json::to_vec(params.features()).expect("feature map serializes");
    let version = params.version().as_bytes();
    let mut out = Vec::with_capacity(32 + version.len() + map.len() + 8 * params.weights().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(params.cols() as u64).to_le_bytes());
    out.extend_from_slice(&(version.len() as u32).to_le_bytes());
    out.extend_from_slice(version);
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    out.extend_from_slice(&map);
    for w in params.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| PolicyError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
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

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let vlen = r.u32()? as usize;
    let version = std::str::from_utf8(r.take(vlen)?)
        .map_err(|e| PolicyError::Checkpoint(format!("version tag: {e}")))?
        .to_owned();
    let mlen = r.u32()? as usize;
    let features: FeatureMap = serde_json::from_slice(r.take(mlen)?).map_err(|e| PolicyError::Checkpoint(format!("feature map: {e}")))?;
    if features.dimension() != rows || features.vocab_size() != cols {
        return Err(PolicyError::Checkpoint(format!(
            "header shape {rows}x{cols} disagrees with feature map {}x{}",
            features.dimension(),
            features.vocab_size()
        )));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| PolicyError::Checkpoint("shape overflow".into()))?;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| PolicyError::Checkpoint("shape overflow".into()))?)?;
    if r.pos != bytes.len() {
        return Err(PolicyError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let weights = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    PolicyParams::from_weights(features, weights, version)
}

pub fn write_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams> {
    decode_checkpoint(&fs::read(path)?)
}
