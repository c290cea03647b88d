//! Run manifests: resolved config, seeds and SHA-256 of every input and output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use geopose::config::RunConfig;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub struct Manifest {
    command: &'static str,
    config: RunConfig,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashes(paths: &[PathBuf], skip: &Path) -> Result<Value> {
    let mut files = Vec::new();
    for p in paths {
        files_under(p, &mut files)?;
    }
    let mut map = serde_json::Map::new();
    for f in files.iter().filter(|f| f.as_path() != skip) {
        map.insert(f.display().to_string(), Value::String(sha256_file(f)?));
    }
    Ok(Value::Object(map))
}

impl Manifest {
    pub fn new(command: &'static str, config: &RunConfig) -> Self {
        Self { command, config: config.clone(), seeds: BTreeMap::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(path.into());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let config: serde_json::Map<String, Value> = self
            .config
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
            .collect();
        let doc = json!({
            "tool": "geopose",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "config": config,
            "seeds": self.seeds,
            "inputs": hashes(&self.inputs, path)?,
            "outputs": hashes(&self.outputs, path)?,
        });
        fs::write(path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// `<file>.manifest.json` beside a single output file.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
