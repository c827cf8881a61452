//! Run manifests: what was run, with which parameters, how long each phase
//! took, and a checksum for every file written.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Run {
    dir: PathBuf,
    command: &'static str,
    started: Instant,
    phase: Instant,
    pub parameters: Map<String, Value>,
    pub results: Map<String, Value>,
    timings: Map<String, Value>,
    outputs: Vec<Value>,
}

impl Run {
    pub fn new(dir: &Path, command: &'static str) -> Result<Run, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        let now = Instant::now();
        Ok(Run {
            dir: dir.to_path_buf(),
            command,
            started: now,
            phase: now,
            parameters: Map::new(),
            results: Map::new(),
            timings: Map::new(),
            outputs: Vec::new(),
        })
    }

    /// Closes the current phase and returns its wall-clock time in ms.
    pub fn lap(&mut self, name: &str) -> f64 {
        let ms = self.phase.elapsed().as_secs_f64() * 1e3;
        self.timings.insert(name.into(), json!(ms));
        self.phase = Instant::now();
        ms
    }

    pub fn param(&mut self, key: &str, v: Value) {
        self.parameters.insert(key.into(), v);
    }

    pub fn result(&mut self, key: &str, v: Value) {
        self.results.insert(key.into(), v);
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Solver(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(json!({
            "file": name,
            "bytes": contents.len(),
            "sha256": sha256_hex(contents),
        }));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, v: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(v).expect("JSON values serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest itself under `name`.
    pub fn finish(mut self, name: &str, config: Value) -> Result<(), CliError> {
        let total = self.started.elapsed().as_secs_f64() * 1e3;
        self.timings.insert("total".into(), json!(total));
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "parameters": self.parameters,
            "results": self.results,
            "timings_ms": self.timings,
            "outputs": self.outputs,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("JSON values serialize") + "\n";
        let path = self.dir.join(name);
        fs::write(&path, text)
            .map_err(|e| CliError::Solver(format!("cannot write {}: {e}", path.display())))
    }
}
