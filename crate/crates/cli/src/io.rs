//! Output directories, run manifests, and dataset directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cmpc_core::synth::{read_dataset, DatasetSplit};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";

/// Refuse an existing output directory unless `force` is set.
pub fn check_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Data(format!("{} exists and is not a directory", dir.display())));
        }
        if !force {
            return Err(CliError::Data(format!(
                "output directory {} already exists (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    Ok(())
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

/// Parse a JSON config file; a malformed file is a flag error.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Flag(format!("config {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: String,
    pub seed: u64,
    /// Seconds since the epoch; taken from `SOURCE_DATE_EPOCH` when set.
    pub created: u64,
    pub config: &'a C,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl<'a, C: Serialize> RunManifest<'a, C> {
    pub fn new(command: &'a str, seed: u64, config: &'a C) -> Self {
        Self {
            command,
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            seed,
            created: created_timestamp(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn write(mut self, dir: &Path, outputs: &[&str]) -> CliResult<()> {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        let json = serde_json::to_string_pretty(&self).map_err(|e| CliError::Data(e.to_string()))?;
        write_file(&dir.join(MANIFEST_FILE), json + "\n")
    }
}

fn created_timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub test_fraction: f64,
    pub stratify: bool,
    pub seed: u64,
    pub test_identities: Vec<usize>,
}

/// A generated dataset directory, already partitioned.
pub struct DataDir {
    pub split: DatasetSplit,
}

impl DataDir {
    pub fn open(path: &Path) -> CliResult<Self> {
        if !path.is_dir() {
            return Err(CliError::Data(format!("dataset directory {} not found", path.display())));
        }
        let records = read_dataset(path)?;
        let split_file: SplitFile = serde_json::from_str(&read_text(&path.join(SPLIT_FILE))?)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.join(SPLIT_FILE).display())))?;
        let test: BTreeSet<usize> = split_file.test_identities.into_iter().collect();
        Ok(Self {
            split: DatasetSplit::from_test_identities(&records, &test),
        })
    }
}
