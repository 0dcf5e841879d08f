//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        5 bytes  "LODAW"
//! version      u32      currently 1
//! payload_len  u64      bytes of f64 payload
//! count        u32      directory entries
//! per entry:
//!   name_len   u32
//!   name       name_len bytes, UTF-8, "frozen/<param>" or "trainable/<param>"
//!   ndim       u32
//!   dims       ndim x u64
//!   offset     u64      byte offset into the payload
//! payload      payload_len bytes of f64 LE, tensors row-major
//! ```
//!
//! Entries are written in name order with contiguous, non-overlapping
//! payload ranges, so identical parameters always give identical bytes.

use std::path::Path;

use loda_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 5] = b"LODAW";
pub const VERSION: u32 = 1;
const FROZEN: &str = "frozen/";
const TRAINABLE: &str = "trainable/";

/// The two namespaces of a weight file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub frozen: ParamStore,
    pub trainable: ParamStore,
}

pub fn encode(file: &WeightFile) -> Vec<u8> {
    let entries: Vec<(String, &Tensor)> = file
        .frozen
        .iter()
        .map(|(n, t)| (format!("{FROZEN}{n}"), t))
        .chain(file.trainable.iter().map(|(n, t)| (format!("{TRAINABLE}{n}"), t)))
        .collect();
    let payload_len: usize = entries.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(64 + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload_len as u64).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.numel() as u64 * 8;
    }
    for (_, t) in &entries {
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
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<WeightFile, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err("bad magic (not a LODAW weight file)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported format version {version} (expected {VERSION})"));
    }
    let payload_len = r.u64()? as usize;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        entries.push((name, dims, offset));
    }
    let payload = &bytes[r.pos..];
    if payload.len() != payload_len {
        return Err(format!(
            "payload is {} bytes but the header declares {payload_len}",
            payload.len()
        ));
    }
    // Ranges must tile the payload exactly, in directory order.
    let mut expected = 0usize;
    let mut file = WeightFile::default();
    for (name, dims, offset) in entries {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("tensor {name}: shape {dims:?} overflows"))?;
        if offset != expected {
            return Err(format!("tensor {name}: offset {offset} overlaps or leaves a gap (expected {expected})"));
        }
        let end = offset
            .checked_add(n * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| format!("tensor {name}: data runs past the end of the payload"))?;
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| format!("tensor {name}: {e}"))?;
        expected = end;
        if let Some(n) = name.strip_prefix(FROZEN) {
            file.frozen.insert(n, t);
        } else if let Some(n) = name.strip_prefix(TRAINABLE) {
            file.trainable.insert(n, t);
        } else {
            return Err(format!("tensor {name}: no frozen/ or trainable/ namespace"));
        }
    }
    if expected != payload.len() {
        return Err(format!("directory covers {expected} of {} payload bytes", payload.len()));
    }
    Ok(file)
}

pub fn save_weights(file: &WeightFile, path: &Path) -> Result<()> {
    std::fs::write(path, encode(file)).map_err(|e| Error::io(path, e))
}

/// Load a weight file. Tensors come back with `requires_grad` set according
/// to their namespace.
pub fn load_weights(path: &Path) -> Result<WeightFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut file = decode(&bytes).map_err(|msg| Error::Weights { path: path.to_path_buf(), msg })?;
    file.frozen.set_requires_grad(false);
    file.trainable.set_requires_grad(true);
    Ok(file)
}
