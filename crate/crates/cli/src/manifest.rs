use std::path::{Path, PathBuf};

use intervene::io::write_atomic;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a command and get the same outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name, with any generated seed appended.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub threads: usize,
    pub seconds: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> intervene::Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> intervene::Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| intervene::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Manifest location for a file output: `forecasts.csv` → `forecasts.csv.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(MANIFEST_FILE);
    file.with_file_name(name)
}
