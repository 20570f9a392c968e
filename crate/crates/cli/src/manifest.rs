use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError};

/// Provenance record written next to every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time_seconds: f64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, argv: &[String]) -> Self {
        Self { command: command.into(), argv: argv.to_vec(), started: Instant::now() }
    }

    pub fn finish(
        &self,
        config: serde_json::Value,
        seed: u64,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        warnings: Vec<String>,
    ) -> RunManifest {
        RunManifest {
            command: self.command.clone(),
            argv: self.argv.clone(),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            inputs,
            outputs,
            warnings,
        }
    }
}

/// `out.csv` -> `out.csv.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}
