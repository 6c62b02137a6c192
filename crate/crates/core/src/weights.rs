//! Model directories: a little-endian `f32` blob plus a JSON sidecar.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SIDECAR_FILE: &str = "model.json";

pub fn weights_digest(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn encode_weights(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn decode_weights(bytes: &[u8], expected_len: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected_len * 4 {
        return Err(Error::ModelFile(format!(
            "weights blob has {} bytes, architecture needs {}",
            bytes.len(),
            expected_len * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_model_dir<S: Serialize>(dir: &Path, params: &[f32], sidecar: &S) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(WEIGHTS_FILE), encode_weights(params))?;
    std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_sidecar<S: DeserializeOwned>(dir: &Path) -> Result<S> {
    let path = dir.join(SIDECAR_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))
}

/// Read the blob, check its length and, when given, its digest.
pub fn read_weights(dir: &Path, expected_len: usize, digest: Option<&str>) -> Result<Vec<f32>> {
    let path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
    let params = decode_weights(&bytes, expected_len)?;
    if let Some(want) = digest {
        let got = weights_digest(&params);
        if got != want {
            return Err(Error::ModelFile(format!("weights digest {got} != sidecar {want}")));
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::ModelFile("non-finite weight".into()));
    }
    Ok(params)
}
