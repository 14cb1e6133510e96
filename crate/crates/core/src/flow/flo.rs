//! Middlebury `.flo`: little-endian f32 magic 202021.25, i32 width, i32
//! height, then `h·w` interleaved `(u, v)` f32 pairs in row-major order.

use std::path::Path;

use super::{Direction, FlowField};
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

/// Largest side accepted when reading, to reject garbage headers early.
const MAX_SIDE: i32 = 1 << 15;

pub fn encode_flo(f: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + f.h * f.w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(f.w as i32).to_le_bytes());
    out.extend_from_slice(&(f.h as i32).to_le_bytes());
    for (u, v) in f.u.iter().zip(&f.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse `.flo` bytes. The format carries no direction; the caller states it.
pub fn decode_flo(bytes: &[u8], direction: Direction) -> Result<FlowField> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| Error::format("truncated .flo header"))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::format(format!("bad .flo magic {magic}")));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if !(1..=MAX_SIDE).contains(&w) || !(1..=MAX_SIDE).contains(&h) {
        return Err(Error::format(format!(".flo size {w}x{h} is invalid")));
    }
    let (w, h) = (w as usize, h as usize);
    let body = &bytes[12..];
    if body.len() != h * w * 8 {
        return Err(Error::format(format!(
            ".flo body has {} bytes, expected {} for {w}x{h}",
            body.len(),
            h * w * 8
        )));
    }
    let mut u = Vec::with_capacity(h * w);
    let mut v = Vec::with_capacity(h * w);
    for px in body.chunks_exact(8) {
        u.push(f32::from_le_bytes([px[0], px[1], px[2], px[3]]));
        v.push(f32::from_le_bytes([px[4], px[5], px[6], px[7]]));
    }
    Ok(FlowField { h, w, u, v, direction })
}

pub fn write_flo(path: impl AsRef<Path>, f: &FlowField) -> Result<()> {
    std::fs::write(path, encode_flo(f))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>, direction: Direction) -> Result<FlowField> {
    decode_flo(&std::fs::read(path)?, direction)
}
