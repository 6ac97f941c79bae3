use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// Record of one invocation, written as `key = value` lines next to its outputs.
pub struct RunManifest {
    command: String,
    seed: u64,
    inputs: Vec<(String, String)>,
    config: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            inputs: Vec::new(),
            config: Vec::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path, bytes: &[u8]) {
        self.inputs
            .push((name.to_string(), format!("{} sha256:{}", path.display(), sha256_hex(bytes))));
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    /// Adds every `key = value` line of `text`, skipping comments.
    pub fn config_text(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=').filter(|_| !line.starts_with('#')) {
                self.config(k.trim(), v.trim());
            }
        }
    }

    pub fn render(&self) -> String {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut s = String::new();
        let mut line = |k: &str, v: &str| writeln!(s, "{k} = {v}").expect("writing to a String");
        line("command", &self.command);
        line("version", env!("CARGO_PKG_VERSION"));
        line("seed", &self.seed.to_string());
        line("timestamp", &ts.to_string());
        for (k, v) in &self.inputs {
            line(&format!("input.{k}"), v);
        }
        for (k, v) in &self.config {
            line(&format!("config.{k}"), v);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        tridetect::write_bytes_atomic(path, self.render().as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}
