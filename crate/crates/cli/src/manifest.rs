//! Run manifest: what ran, with which resolved settings, what it produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub exit_code: u8,
    pub error: Option<String>,
}

/// Filled in by a command while it runs.
#[derive(Debug)]
pub struct RunRecord {
    pub command: String,
    pub config: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
    /// False when the command must not write into its `--out` directory.
    pub out_dir_usable: bool,
}

impl RunRecord {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            config: serde_json::Value::Null,
            artifacts: vec![],
            out_dir_usable: true,
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn finish(self, elapsed: Duration, error: Option<&CliError>, exit_code: u8) -> RunManifest {
        RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            artifacts: self.artifacts,
            wall_time_s: elapsed.as_secs_f64(),
            exit_code,
            error: error.map(|e| e.to_string()),
        }
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)
    }
}
