use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_f32_le, read_json, sha256_hex, sidecar_paths, write_f32_le, write_json};
use crate::{Error, Result};

use super::{Network, NetworkConfig};

pub const CHECKPOINT_FORMAT: &str = "deformreg-checkpoint";

/// JSON half of a checkpoint; the parameter payload (parameters then
/// batch-norm running statistics, layer order, f32 little-endian) sits next
/// to it with a `.raw` extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: NetworkConfig,
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub values: usize,
    pub payload_sha256: String,
}

fn payload_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>, epoch: usize, lr: f64, seed: u64) -> Result<CheckpointHeader> {
    let (json, raw) = sidecar_paths(path);
    let state = net.state();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        config: net.config().clone(),
        epoch,
        lr,
        seed,
        values: state.len(),
        payload_sha256: sha256_hex(&payload_bytes(&state)),
    };
    let as_f64: Vec<f64> = state.iter().map(|&v| v as f64).collect();
    write_f32_le(&raw, &as_f64)?;
    write_json(&json, &header)?;
    Ok(header)
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointHeader)> {
    let (json, raw) = sidecar_paths(path);
    let header: CheckpointHeader = read_json(&json)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            &json,
            format!("unknown checkpoint format {:?}", header.format),
        ));
    }
    let mut net = Network::new(header.config.clone())?;
    if net.state_len() != header.values {
        return Err(Error::format(
            &json,
            format!(
                "header lists {} values but the config needs {}",
                header.values,
                net.state_len()
            ),
        ));
    }
    let values: Vec<f32> = read_f32_le(&raw, header.values)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    if sha256_hex(&payload_bytes(&values)) != header.payload_sha256 {
        return Err(Error::format(&raw, "payload checksum mismatch".to_string()));
    }
    net.load_state(&values)?;
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig {
            input_size: [16, 16],
            c0: 2,
            output_size: [4, 2, 4],
            n_dc: 2,
            seed: 3,
            ..Default::default()
        };
        let net = Network::<f32>::new(cfg).unwrap();
        let path = dir.path().join("model");
        let h = save_checkpoint(&path, &net, 4, 1e-3, 3).unwrap();
        let (back, h2) = load_checkpoint(&path).unwrap();
        assert_eq!(h, h2);
        assert_eq!(back.state(), net.state());
        let raw = dir.path().join("model.raw");
        let mut bytes = std::fs::read(&raw).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&raw, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
