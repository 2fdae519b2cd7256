//! Per-invocation bookkeeping: parameter resolution against the config file,
//! hashed inputs and outputs, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<output>.manifest.json` next to the output.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub struct Run {
    command: &'static str,
    section: toml::Table,
    params: Map<String, Value>,
    seeds: Map<String, Value>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    summary: Map<String, Value>,
}

impl Run {
    /// Reads the `[command]` table of the config file, if one is given.
    pub fn new(command: &'static str, config: Option<&Path>) -> Result<Self> {
        let mut run = Run {
            command,
            section: toml::Table::new(),
            params: Map::new(),
            seeds: Map::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: Map::new(),
        };
        if let Some(path) = config {
            let bytes = run.read(path)?;
            let text = String::from_utf8(bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let mut root: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            if let Some(section) = root.remove(command) {
                run.section = match section {
                    toml::Value::Table(t) => t,
                    _ => return Err(CliError::usage(format!("config section [{command}] must be a table"))),
                };
            }
        }
        Ok(run)
    }

    fn configured<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.section.get(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| CliError::usage(format!("config [{}] {key}: {e}", self.command))),
        }
    }

    /// Flag value, else config value; recorded in the manifest.
    pub fn opt<T: DeserializeOwned + Serialize>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.configured(key)?,
        };
        if let Some(v) = &v {
            self.params.insert(key.into(), serde_json::to_value(v).expect("parameter serializes"));
        }
        Ok(v)
    }

    pub fn param<T: DeserializeOwned + Serialize>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        let v = self.opt(flag, key)?.unwrap_or(default);
        self.params.insert(key.into(), serde_json::to_value(&v).expect("parameter serializes"));
        Ok(v)
    }

    pub fn required<T: DeserializeOwned + Serialize>(&mut self, flag: Option<T>, key: &str) -> Result<T> {
        self.opt(flag, key)?
            .ok_or_else(|| CliError::usage(format!("--{} is required", key.replace('_', "-"))))
    }

    /// Seeds are never defaulted.
    pub fn seed(&mut self, flag: Option<u64>, key: &str) -> Result<u64> {
        let s: u64 = self.required(flag, key)?;
        self.seeds.insert(key.into(), json!(s));
        Ok(s)
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(value).expect("summary serializes"));
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Write the manifest for `output`; no timestamps, keys sorted.
    pub fn finish(self, output: &Path) -> Result<()> {
        let config = Value::Object(self.params);
        let config_hash = sha256_hex(serde_json::to_string(&config).expect("json").as_bytes());
        let files = |m: BTreeMap<String, String>| -> Value {
            Value::Array(m.into_iter().map(|(path, sha256)| json!({"path": path, "sha256": sha256})).collect())
        };
        let manifest = json!({
            "command": self.command,
            "config": config,
            "config_hash": config_hash,
            "seeds": Value::Object(self.seeds),
            "inputs": files(self.inputs),
            "outputs": files(self.outputs),
            "summary": Value::Object(self.summary),
            "versions": {
                "atomotion": env!("CARGO_PKG_VERSION"),
                "manifest": 1,
            },
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("json");
        text.push('\n');
        let path = manifest_path(output);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
