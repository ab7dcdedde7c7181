//! Parameter checkpoints.
//!
//! ```text
//! <dir>/manifest.json  format_version, config, step, seed, n_params,
//!                      tensors [{name, shape}] in buffer order
//! <dir>/weights.bin    f32 little-endian values, tensors back to back in
//!                      the documented buffer order, each row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{AdapterConfig, AdapterParams};
use crate::error::{DrumError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: AdapterConfig,
    pub step: u64,
    pub seed: u64,
    pub n_params: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub step: u64,
    pub seed: u64,
}

pub fn save_checkpoint(dir: &Path, params: &AdapterParams, step: u64, seed: u64) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: *params.config(),
        step,
        seed,
        n_params: params.len(),
        tensors: params
            .layout()
            .slots()
            .into_iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: [s.rows, s.cols],
            })
            .collect(),
    };
    let mut mbytes = serde_json::to_vec_pretty(&manifest)?;
    mbytes.push(b'\n');
    let mut wbytes = Vec::with_capacity(4 * params.len());
    for &x in params.as_slice() {
        wbytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::create_dir_all(dir).map_err(|e| DrumError::io(dir, e))?;
    let mp = dir.join("manifest.json");
    fs::write(&mp, mbytes).map_err(|e| DrumError::io(&mp, e))?;
    let wp = dir.join("weights.bin");
    fs::write(&wp, wbytes).map_err(|e| DrumError::io(&wp, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join("manifest.json");
    let mbytes = fs::read(&mp).map_err(|e| DrumError::io(&mp, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| DrumError::Format(format!("{}: {e}", mp.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(DrumError::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let wp = dir.join("weights.bin");
    let wbytes = fs::read(&wp).map_err(|e| DrumError::io(&wp, e))?;
    if wbytes.len() != 4 * manifest.n_params {
        return Err(DrumError::Format(format!(
            "weights.bin holds {} bytes, manifest declares {} parameters",
            wbytes.len(),
            manifest.n_params
        )));
    }
    let data = wbytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let params = AdapterParams::from_flat(manifest.config, data)?;
    let expected: Vec<TensorEntry> = params
        .layout()
        .slots()
        .into_iter()
        .map(|s| TensorEntry { name: s.name.clone(), shape: [s.rows, s.cols] })
        .collect();
    if expected != manifest.tensors {
        return Err(DrumError::Format("tensor table does not match the architecture".into()));
    }
    Ok(Checkpoint {
        params,
        step: manifest.step,
        seed: manifest.seed,
    })
}
