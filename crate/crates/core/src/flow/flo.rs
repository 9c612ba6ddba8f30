//! Middlebury `.flo` files: `"PIEH"`, little-endian `i32` width and
//! height, then interleaved `(u, v)` `f32` pairs in row-major order.

use std::path::Path;

use super::tvl1::FlowField;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PIEH";

pub fn flo_to_bytes(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `.flo` bytes; `path` is used only in error messages.
pub fn flo_from_bytes(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "file shorter than the 12-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let dim = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::format(path, "size overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {w}x{h}, found {}",
                bytes.len()
            ),
        ));
    }
    let mut flow = FlowField::zeros(w, h);
    for (i, pair) in bytes[12..].chunks_exact(8).enumerate() {
        flow.u[i] = f32::from_le_bytes(pair[..4].try_into().unwrap());
        flow.v[i] = f32::from_le_bytes(pair[4..].try_into().unwrap());
    }
    Ok(flow)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, flo_to_bytes(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    flo_from_bytes(&bytes, path)
}
