//! Binary model format: `"DCSG"`, version, segment table, then every value
//! as a little-endian f64 in segment order. Integers are little-endian u32.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Layout, ParamVector, Part};

pub const MAGIC: &[u8; 4] = b"DCSG";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn encode_model(params: &ParamVector) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(64 + 8 * (layout.backbone_len() + layout.head_len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layout.segments().len() as u32).to_le_bytes());
    for seg in layout.segments() {
        out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.shape.len() as u32).to_le_bytes());
        for &d in &seg.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in params.values_in_segment_order() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Which part a segment belongs to, from its name prefix.
fn part_of(name: &str) -> Result<Part> {
    if name.starts_with("backbone.") {
        Ok(Part::Backbone)
    } else if name.starts_with("head.") {
        Ok(Part::Head)
    } else {
        Err(Error::Format(format!("segment {name:?} is neither backbone.* nor head.*")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ParamVector> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let version = c.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let count = c.u32("segment count")? as usize;
    let mut specs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "segment name")?)
            .map_err(|_| Error::Format("segment name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let part = part_of(&name)?;
        specs.push((name, part, shape));
    }
    let layout = Arc::new(Layout::new(specs));
    let mut backbone = vec![0.0; layout.backbone_len()];
    let mut head = vec![0.0; layout.head_len()];
    for seg in layout.segments() {
        let dst = match seg.part {
            Part::Backbone => &mut backbone[seg.range()],
            Part::Head => &mut head[seg.range()],
        };
        for v in dst.iter_mut() {
            *v = f64::from_le_bytes(c.take(8, &seg.name)?.try_into().expect("8 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last value", bytes.len() - c.pos)));
    }
    ParamVector::new(layout, backbone, head).map_err(|e| Error::Format(e.to_string()))
}

/// Hex SHA-256 of the encoded model.
pub fn model_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_model(path: &Path, params: &ParamVector) -> Result<String> {
    let bytes = encode_model(params);
    std::fs::write(path, &bytes)?;
    Ok(model_hash(&bytes))
}

/// Loads a model and returns it with the file's hash.
pub fn load_model(path: &Path) -> Result<(ParamVector, String)> {
    let bytes = std::fs::read(path)?;
    Ok((decode_model(&bytes)?, model_hash(&bytes)))
}
