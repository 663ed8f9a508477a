//! Run manifests: enough to re-execute a command and check its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Command;
use crate::config::Config;
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: Command,
    pub config: Config,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    /// SHA-256 of every file read, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hash_outputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, sha256_file(p)?))
        })
        .collect()
}

pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>, CliError> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

impl Manifest {
    pub fn file_name(command: &Command) -> String {
        format!("manifest-{}.json", command.name())
    }

    pub fn save(&self) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Usage(format!("manifest {} field `{field}`: {}", path.display(), e.into_inner()))
        })
    }

    /// Names whose hashes differ from `other`, including missing entries.
    pub fn output_mismatches(&self, fresh: &BTreeMap<String, String>) -> Vec<String> {
        let mut bad: Vec<String> = self
            .outputs
            .iter()
            .filter(|(k, v)| fresh.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        bad.extend(fresh.keys().filter(|k| !self.outputs.contains_key(*k)).cloned());
        bad
    }
}
