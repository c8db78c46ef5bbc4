//! Checkpoint file: one JSON header line, a newline, then every parameter in
//! declaration order as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, VelocityNet};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "volflow-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub net: NetConfig,
    pub param_count: usize,
    pub byte_length: usize,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined metadata (training config, epoch, metrics).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(net: &VelocityNet<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let flat = net.params().flatten();
    let header = CheckpointHeader {
        format: FORMAT_TAG.into(),
        version: 1,
        net: net.config().clone(),
        param_count: flat.len(),
        byte_length: 4 * flat.len(),
        tensors: net
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        meta,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    out.push(b'\n');
    out.reserve(4 * flat.len());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(VelocityNet<f32>, CheckpointHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::json("checkpoint header", e))?;
    if header.format != FORMAT_TAG || header.version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.byte_length || header.byte_length != 4 * header.param_count {
        return Err(Error::Length {
            expected: header.byte_length as u64,
            found: blob.len() as u64,
        });
    }
    // Seed is irrelevant: every parameter is overwritten below.
    let mut net = VelocityNet::<f32>::init(&header.net, 0)?;
    if net.param_count() != header.param_count {
        return Err(Error::Format(format!(
            "config implies {} parameters, header says {}",
            net.param_count(),
            header.param_count
        )));
    }
    for (p, t) in net.params().iter().zip(&header.tensors) {
        if p.name != t.name || p.shape != t.shape {
            return Err(Error::Format(format!("tensor {} {:?} does not match layout {} {:?}", t.name, t.shape, p.name, p.shape)));
        }
    }
    let flat: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    net.load_flat(&flat)?;
    Ok((net, header))
}

pub fn save(net: &VelocityNet<f32>, meta: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(VelocityNet<f32>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            in_frames: 2,
            spatial: [8, 8, 8],
            stem_channels: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_parameters() {
        let net = VelocityNet::<f32>::init(&small(), 11).unwrap();
        let bytes = encode(&net, serde_json::json!({"epoch": 3})).unwrap();
        let (back, header) = decode(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(header.meta["epoch"], 3);
        assert_eq!(header.byte_length, 4 * net.param_count());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let net = VelocityNet::<f32>::init(&small(), 11).unwrap();
        let mut bytes = encode(&net, serde_json::Value::Null).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Length { .. })));
    }
}
