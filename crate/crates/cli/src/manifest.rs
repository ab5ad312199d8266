use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ecs_pinn::data::ScaleRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance of one command invocation, enough to re-run it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub scale: Option<ScaleRecord>,
    pub version: String,
    pub duration_s: f64,
}

pub struct RunLog {
    command: &'static str,
    started: Instant,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub scale: Option<ScaleRecord>,
}

impl RunLog {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            scale: None,
        }
    }

    /// Writes the manifest into `out_dir` once every listed output exists.
    pub fn finish(self, out_dir: &Path) -> Result<PathBuf, CliError> {
        for p in &self.outputs {
            if !p.exists() {
                return Err(CliError::Io(format!("expected output {} is missing", p.display())));
            }
        }
        let path = out_dir.join(RUN_MANIFEST_FILE);
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            scale: self.scale,
            version: env!("ECS_PINN_VERSION").to_string(),
            duration_s: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
