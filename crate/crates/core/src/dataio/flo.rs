//! Middlebury `.flo` files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{debug_validate, FlowField};

/// Header magic, stored as a little-endian `f32`.
pub const FLO_MAGIC: f32 = 202021.25;

const MAX_SIDE: usize = 1 << 16;

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    debug_validate(flow)?;
    if flow.valid().is_some() {
        return Err(Error::Format(
            ".flo cannot store a validity mask; use the KITTI PNG encoding".into(),
        ));
    }
    let mut out = Vec::with_capacity(12 + 4 * flow.uv().len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.uv() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("truncated header: {} bytes", bytes.len())));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 || width as usize > MAX_SIDE || height as usize > MAX_SIDE {
        return Err(Error::Format(format!("implausible size {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let payload = &bytes[12..];
    let need = width * height * 2 * 4;
    if payload.len() != need {
        return Err(Error::Format(format!(
            "payload is {} bytes, a {width}x{height} flow needs {need}",
            payload.len()
        )));
    }
    let uv = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FlowField::new(height, width, uv, None)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_flo(flow)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
