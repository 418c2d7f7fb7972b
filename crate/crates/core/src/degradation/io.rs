//! Little-endian binary formats for cubes (`HCUB`) and spectral responses (`SRSP`).

use std::fs;
use std::path::Path;

use super::{HsiCube, SpectralResponse};
use crate::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HCUB";
const CUBE_VERSION: u16 = 1;
const CUBE_HEADER: usize = 4 + 2 + 2 + 4 * 3;
const RESPONSE_MAGIC: &[u8; 4] = b"SRSP";

/// Serialises a cube; values are stored as `f32`.
pub fn encode_cube(cube: &HsiCube) -> Vec<u8> {
    let (b, h, w) = cube.dims();
    let mut out = Vec::with_capacity(CUBE_HEADER + 4 * cube.data().len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in [b, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in cube.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect()
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < 4 || &bytes[..4] != CUBE_MAGIC {
        return Err(Error::Format("bad cube magic (expected HCUB)".into()));
    }
    if bytes.len() < CUBE_HEADER {
        return Err(Error::Format("truncated cube header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CUBE_VERSION {
        return Err(Error::Format(format!("unsupported cube version {version}")));
    }
    let b = read_u32(bytes, 8)? as usize;
    let h = read_u32(bytes, 12)? as usize;
    let w = read_u32(bytes, 16)? as usize;
    let payload = b
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("cube dimensions {b}x{h}x{w} overflow")))?;
    let body = &bytes[CUBE_HEADER..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "cube {b}x{h}x{w} needs {payload} data bytes, file has {}",
            body.len()
        )));
    }
    HsiCube::new(b, h, w, read_f32s(body)).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_cube(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    fs::write(path, encode_cube(cube))?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    decode_cube(&fs::read(path)?)
}

pub fn save_response(path: impl AsRef<Path>, r: &SpectralResponse) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * r.matrix().len());
    out.extend_from_slice(RESPONSE_MAGIC);
    out.extend_from_slice(&(r.msi_bands() as u32).to_le_bytes());
    out.extend_from_slice(&(r.bands() as u32).to_le_bytes());
    for &v in r.matrix() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a response matrix. Rows are renormalised after the `f32` round trip.
pub fn load_response(path: impl AsRef<Path>) -> Result<SpectralResponse> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != RESPONSE_MAGIC {
        return Err(Error::Format("bad response magic (expected SRSP)".into()));
    }
    let b = read_u32(&bytes, 4)? as usize;
    let big_b = read_u32(&bytes, 8)? as usize;
    let payload = b
        .checked_mul(big_b)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("response dimensions overflow".into()))?;
    if bytes.len() - 12 != payload {
        return Err(Error::Format(format!(
            "response {b}x{big_b} needs {payload} data bytes, file has {}",
            bytes.len() - 12
        )));
    }
    let mut m = read_f32s(&bytes[12..]);
    for row in m.chunks_mut(big_b.max(1)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    SpectralResponse::new(b, big_b, m).map_err(|e| Error::Format(e.to_string()))
}
