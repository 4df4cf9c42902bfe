//! Output directory bookkeeping: every command records what it read, what
//! it wrote and the configuration it ran with in `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: serde_json::Value,
    /// SHA-256 of every input file, by path.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Files written next to the manifest, in write order.
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Writes command outputs into one directory and finishes with the manifest.
pub struct OutputDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str, seed: Option<u64>, threads: usize) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                seed,
                threads,
                outputs: Vec::new(),
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn set_config(&mut self, config: &impl Serialize) {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records a file written by other code under `name`.
    pub fn record(&mut self, name: &str) {
        self.manifest.outputs.push(name.to_string());
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.manifest.finished_unix_ms = now_ms();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.path(MANIFEST);
        std::fs::write(&path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_lowercase_hex() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_outputs_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"abc").unwrap();
        let mut out = OutputDir::create(&dir.path().join("out"), "stats", Some(3), 1).unwrap();
        out.add_input(&input).unwrap();
        out.write("a/report.json", "{}").unwrap();
        let path = out.finish().unwrap();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(m["command"], "stats");
        assert_eq!(m["seed"], 3);
        assert_eq!(m["outputs"][0], "a/report.json");
        assert!(m["inputs"][input.display().to_string()].as_str().unwrap().starts_with("ba7816bf"));
        assert!(dir.path().join("out/a/report.json").exists());
    }
}
