use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drum_core::{DrumError, Result};
use serde::Serialize;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub engine_version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn new(subcommand: &str, seed: u64, threads: Option<usize>) -> Self {
        Self {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                engine_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                threads,
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.manifest.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    /// Writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        write_json(path, &self.manifest)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DrumError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DrumError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DrumError::io(path, e))
}

/// Manifest path for a single-file output: `<stem>.run_manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{RUN_MANIFEST}"))
}
