//! `manifest.json`: what a run read, wrote and was configured with.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Serialize)]
pub struct RunManifest {
    command: &'static str,
    version: &'static str,
    seed: Option<u64>,
    config: BTreeMap<&'static str, String>,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, String>,
    /// sha256 of every input and output, keyed by path
    checksums: BTreeMap<String, String>,
    wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &'static str, seed: Option<u64>, config: Vec<(&'static str, String)>) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: config.into_iter().collect(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            checksums: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    fn record(&mut self, path: &Path) -> std::io::Result<String> {
        let shown = path.display().to_string();
        self.checksums.insert(shown.clone(), sha256_file(path)?);
        Ok(shown)
    }

    pub fn input(&mut self, role: &'static str, path: &Path) -> std::io::Result<()> {
        let shown = self.record(path)?;
        self.inputs.insert(role, shown);
        Ok(())
    }

    pub fn output(&mut self, role: &'static str, path: &Path) -> std::io::Result<()> {
        let shown = self.record(path)?;
        self.outputs.insert(role, shown);
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, started: Instant) -> Result<(), Failure> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}
