use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Wall-clock seconds per named phase. Kept in its own section so that
/// everything else in a report is reproducible byte for byte.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
}

impl Timing {
    pub fn record(&mut self, phase: &str, start: std::time::Instant) {
        self.seconds
            .insert(phase.to_string(), start.elapsed().as_secs_f64());
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    /// SHA-256 of each input file, keyed by role.
    inputs: &'a BTreeMap<String, String>,
    config: &'a ExperimentConfig,
    result: &'a T,
    timing: &'a Timing,
}

/// Output directory plus the provenance every report carries.
pub struct Reporter {
    pub dir: PathBuf,
    pub inputs: BTreeMap<String, String>,
}

impl Reporter {
    pub fn new(dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        Ok(Reporter {
            dir,
            inputs: BTreeMap::new(),
        })
    }

    /// Reads an input file and records its digest under `role`.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.inputs.insert(role.to_string(), digest(&bytes));
        Ok(bytes)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(
        &self,
        command: &str,
        config: &ExperimentConfig,
        result: &T,
        timing: &Timing,
    ) -> Result<PathBuf, CliError> {
        let report = Report {
            command,
            config_hash: config.hash(),
            seed: config.seed,
            inputs: &self.inputs,
            config,
            result,
            timing,
        };
        let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
        json.push(b'\n');
        self.write_bytes(&format!("{command}.json"), &json)
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shorthand for building CSV rows.
pub fn cells(values: &[&dyn Display]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}
