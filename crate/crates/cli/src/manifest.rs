//! Run manifests: one `manifest.json` per output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FORMAT: &str = "provts-manifest";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Fields that legitimately differ between replays of the same run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Runtime {
    pub argv: Vec<String>,
    pub jobs: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Effective configuration; accepted back by `--config`.
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    /// File names relative to the output directory, in write order.
    pub outputs: Vec<String>,
    pub runtime: Runtime,
}

/// Collects the artifacts written into one output directory.
pub struct OutputDir {
    pub dir: PathBuf,
    pub files: Vec<String>,
    inputs: Vec<PathBuf>,
}

impl OutputDir {
    /// Creates `dir`, refusing to overwrite another command's artifacts or any input.
    pub fn create(dir: &Path, command: &str, inputs: &[PathBuf]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let existing = dir.join(MANIFEST_FILE);
        if existing.exists() {
            let text = fs::read_to_string(&existing)?;
            let previous: RunManifest = serde_json::from_str(&text).map_err(|_| {
                provts::Error::InvalidConfig(format!("{} is not a provts manifest", existing.display()))
            })?;
            if previous.command != command {
                return Err(provts::Error::InvalidConfig(format!(
                    "{} already holds `{}` output; choose another --out",
                    dir.display(),
                    previous.command
                ))
                .into());
            }
        }
        let inputs = inputs
            .iter()
            .map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone()))
            .collect();
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            inputs,
        })
    }

    /// Path for a new artifact, recorded in the manifest.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(canonical) = fs::canonicalize(&path) {
            if self.inputs.contains(&canonical) {
                return Err(provts::Error::InvalidConfig(format!(
                    "output {} would overwrite an input",
                    path.display()
                ))
                .into());
            }
        }
        self.files.push(name.to_string());
        Ok(path)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }
}

/// Reads a `--config` file; a manifest contributes its `config` snapshot.
pub fn read_config(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(provts::Error::from)?;
    if value.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        return Ok(value.get("config").cloned().unwrap_or(Value::Null));
    }
    Ok(value)
}
