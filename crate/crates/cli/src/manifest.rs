use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use pehmqc::acquisition::Audit;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Every flag after defaults and profiles are applied.
    pub parameters: serde_json::Value,
    /// File name to SHA-256.
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audit: Option<Audit>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub struct ManifestBuilder {
    start: Instant,
    m: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, parameters: serde_json::Value) -> Self {
        ManifestBuilder {
            start: Instant::now(),
            m: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                parameters,
                input_hashes: BTreeMap::new(),
                output_hashes: BTreeMap::new(),
                audit: None,
                wall_time_s: 0.0,
            },
        }
    }

    pub fn input(&mut self, name: impl Into<String>, path: &Path) -> Result<(), CliError> {
        self.m.input_hashes.insert(name.into(), hash_file(path)?);
        Ok(())
    }

    pub fn input_hash(&mut self, name: impl Into<String>, hash: String) {
        self.m.input_hashes.insert(name.into(), hash);
    }

    /// Records the hash of a file relative to `root`.
    pub fn output(&mut self, root: &Path, rel: &str) -> Result<(), CliError> {
        self.m
            .output_hashes
            .insert(rel.into(), hash_file(&root.join(rel))?);
        Ok(())
    }

    pub fn audit(&mut self, a: Audit) {
        self.m.audit = Some(match self.m.audit {
            Some(prev) => Audit {
                unitarity: prev.unitarity.max(a.unitarity),
                hermiticity: prev.hermiticity.max(a.hermiticity),
                trace_drift: prev.trace_drift.max(a.trace_drift),
                purity_drift: prev.purity_drift.max(a.purity_drift),
                steps: prev.steps + a.steps,
            },
            None => a,
        });
    }

    pub fn write(mut self, path: &Path) -> Result<RunManifest, CliError> {
        self.m.wall_time_s = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.m).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(self.m)
    }
}
