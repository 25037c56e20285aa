//! Output directory handling and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub struct OutDir {
    pub path: PathBuf,
    artifacts: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(path).map_err(|e| Failure::io(format!("cannot create {}", path.display()), e))?;
        Ok(OutDir { path: path.to_path_buf(), artifacts: BTreeMap::new(), inputs: BTreeMap::new() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(|e| Failure::io(format!("cannot write {}", p.display()), e))?;
        self.artifacts.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Records a file some other routine wrote into the directory.
    pub fn register(&mut self, name: &str) -> Result<(), Failure> {
        let p = self.file(name);
        let bytes = std::fs::read(&p).map_err(|e| Failure::io(format!("cannot read {}", p.display()), e))?;
        self.artifacts.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn register_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(
            path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
            hex::encode(Sha256::digest(bytes)),
        );
    }

    /// Manifest for commands that only transform earlier output.
    pub fn finish_plain(self, command: &'static str) -> Result<(), Failure> {
        let text = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": self.inputs,
            "artifacts": self.artifacts,
        });
        let mut text = serde_json::to_string_pretty(&text).expect("manifest serializes");
        text.push('\n');
        let p = self.file(&format!("{command}_manifest.json"));
        std::fs::write(&p, text).map_err(|e| Failure::io(format!("cannot write {}", p.display()), e))
    }

    pub fn finish(mut self, manifest: Manifest) -> Result<(), Failure> {
        let name = format!("{}_manifest.json", manifest.command);
        let full = FullManifest { manifest, artifacts: std::mem::take(&mut self.artifacts) };
        let mut text = serde_json::to_string_pretty(&full).expect("manifest serializes");
        text.push('\n');
        let p = self.file(&name);
        std::fs::write(&p, text).map_err(|e| Failure::io(format!("cannot write {}", p.display()), e))
    }
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub scenario: String,
    pub scenario_name: String,
    pub scenario_hash: String,
    pub seed: u64,
    /// How per-node, per-replicate seeds derive from `seed`.
    pub seed_rule: &'static str,
    pub parameters: BTreeMap<String, Value>,
}

#[derive(Serialize)]
struct FullManifest {
    #[serde(flatten)]
    manifest: Manifest,
    /// SHA-256 of every file written by the command.
    artifacts: BTreeMap<String, String>,
}

pub const SEED_RULE: &str = "replicate r at node k uses sub_seed(seed, [k, r])";

/// Builds CSV text in memory; the caller writes it once.
pub struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header.iter().map(|s| s.as_ref())).expect("in-memory write");
        Table { w }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        self.w.write_record(cells.iter().map(|s| s.as_ref())).expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.w.into_inner().expect("in-memory flush")
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}
