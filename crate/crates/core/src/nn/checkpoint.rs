//! Flat little-endian checkpoint layout:
//!
//! ```text
//! magic        8 bytes   "GALNMLP1"
//! layer_count  u32
//! dims         layer_count × (fan_in u32, fan_out u32)
//! payload      per layer: weights (fan_in × fan_out f64, row-major), then bias (fan_out f64)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GALNMLP1";

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.param_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.layers().len() as u32).to_le_bytes());
    for layer in params.layers() {
        out.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
    }
    for layer in params.layers() {
        // `iter` walks logical row-major order regardless of memory layout.
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Version {
            path: path.to_path_buf(),
            message: "missing checkpoint magic".into(),
        });
    }
    let mut cursor = 8;
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        let end = *cursor + 4;
        let chunk = bytes
            .get(*cursor..end)
            .ok_or_else(|| bad(format!("truncated header at byte {}", *cursor)))?;
        *cursor = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    };
    let count = read_u32(&mut cursor)? as usize;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let fan_in = read_u32(&mut cursor)? as usize;
        let fan_out = read_u32(&mut cursor)? as usize;
        dims.push((fan_in, fan_out));
    }
    let expected: usize = dims.iter().map(|(i, o)| (i * o + o) * 8).sum();
    if bytes.len() - cursor != expected {
        return Err(bad(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len() - cursor
        )));
    }
    let mut floats = bytes[cursor..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let layers = dims
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w: Vec<f64> = floats.by_ref().take(fan_in * fan_out).collect();
            let b: Vec<f64> = floats.by_ref().take(fan_out).collect();
            Dense {
                weights: Array2::from_shape_vec((fan_in, fan_out), w).expect("sized above"),
                bias: Array1::from_vec(b),
            }
        })
        .collect();
    ModelParams::from_layers(layers)
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
