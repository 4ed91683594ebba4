use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::CliError;

/// Run record written next to every command's outputs. Contains the
/// effective configuration, input file hashes, tool version, and wall time;
/// wall time is informational and excluded from any bitwise-reproducibility
/// comparison.
#[derive(Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub effective_config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

/// FNV-1a 64-bit content hash, hex encoded.
pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot hash {}: {e}", path.display())))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn write(self, out_dir: &Path) -> Result<(), CliError> {
        let manifest = Manifest {
            tool: "ddtrack".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            seed: self.seed,
            effective_config: self.config,
            inputs: self.inputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}
