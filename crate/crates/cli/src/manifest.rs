use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub master_seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub tool_version: String,
    pub arguments: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, master_seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            inputs: Vec::new(),
            outputs: Vec::new(),
            master_seed,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            arguments: std::env::args().skip(1).collect(),
        }
    }

    pub fn input(mut self, p: impl Into<PathBuf>) -> Self {
        self.inputs.push(p.into());
        self
    }

    pub fn output(mut self, p: impl Into<PathBuf>) -> Self {
        self.outputs.push(p.into());
        self
    }

    /// Writes `path` and returns it.
    pub fn write(&self, path: &Path) -> Result<PathBuf, Box<dyn Error>> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(path.to_path_buf())
    }
}

/// `<dir>/<stem>.manifest.json` for an output file.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.manifest.json"))
}
