use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::network::{ExtractorWeights, NetworkConfig, Tensor};

/// Pointwise nonlinearity used by every hidden layer.
pub const ACTIVATION: &str = "tanh";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    activation: String,
    channels: [usize; 3],
    descriptor_dim: usize,
    window: usize,
    seed: u64,
    tau: f64,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` plus one little-endian f32 blob per tensor.
pub fn save_checkpoint(weights: &ExtractorWeights, dir: &Path) -> Result<()> {
    weights.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for t in &weights.tensors {
        let file = format!("{}.f32", t.name);
        let bytes: Vec<u8> = t.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            file,
        });
    }
    let c = &weights.config;
    let manifest = Manifest {
        format: "vtr-checkpoint-1".into(),
        activation: ACTIVATION.into(),
        channels: c.channels,
        descriptor_dim: c.descriptor_dim(),
        window: c.window,
        seed: c.seed,
        tau: c.tau,
        tensors: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ExtractorWeights> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.activation != ACTIVATION {
        return Err(Error::data(&path, format!("unsupported activation {}", m.activation)));
    }
    let config = NetworkConfig {
        channels: m.channels,
        window: m.window,
        seed: m.seed,
        tau: m.tau,
    };
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for e in m.tensors {
        let blob_path = dir.join(&e.file);
        let bytes = fs::read(&blob_path).map_err(|err| Error::io(&blob_path, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::data(&blob_path, format!("{} bytes for {n} values", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        tensors.push(Tensor {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    let weights = ExtractorWeights { config, tensors };
    weights.validate().map_err(|e| Error::data(&path, e.to_string()))?;
    Ok(weights)
}
