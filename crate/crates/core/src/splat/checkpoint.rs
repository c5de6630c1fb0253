//! Map checkpoint files and point-cloud export.
//!
//! A checkpoint is little-endian: the magic `MBAG`, a `u32` version, a `u64`
//! Gaussian count, then one record of 14 `f32` per Gaussian laid out as
//! mean (3), log-scale (3), quaternion `(x, y, z, w)` (4), opacity logit (1),
//! and RGB (3).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::gaussian::{Gaussian3D, GaussianMap, PARAMS_PER_GAUSSIAN};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MBAG";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = PARAMS_PER_GAUSSIAN * 4;

pub fn encode_checkpoint(map: &GaussianMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.len() * RECORD_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for g in map.gaussians() {
        for v in g.params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GaussianMap> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
        return Err(bad("missing MBAG header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if count.checked_mul(RECORD_LEN) != Some(body.len()) {
        return Err(Error::Checkpoint(format!(
            "expected {count} records, found {} bytes",
            body.len()
        )));
    }
    let gaussians = body.chunks_exact(RECORD_LEN).map(|rec| {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        for (v, b) in p.iter_mut().zip(rec.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
        Gaussian3D::from_params(&p)
    });
    Ok(GaussianMap::from_gaussians(gaussians))
}

pub fn write_checkpoint(path: &Path, map: &GaussianMap) -> Result<()> {
    fs::write(path, encode_checkpoint(map)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<GaussianMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Writes `x y z r g b` per Gaussian, colors in `[0, 1]`.
pub fn write_point_cloud(path: &Path, map: &GaussianMap) -> Result<()> {
    let mut out = Vec::new();
    for g in map.gaussians() {
        let (m, c) = (g.mean, g.color);
        writeln!(out, "{} {} {} {} {} {}", m.x, m.y, m.z, c.x, c.y, c.z).expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
