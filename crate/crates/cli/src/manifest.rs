use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Timestamps {
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides both.
    pub started: u64,
    pub finished: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub flags: BTreeMap<String, String>,
    pub scenario_digest: Option<String>,
    pub timestamps: Timestamps,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects outputs of one run and writes them, manifest last.
pub struct OutDir {
    root: PathBuf,
    command: String,
    flags: BTreeMap<String, String>,
    digest: Option<String>,
    started: u64,
    outputs: Vec<OutputFile>,
}

impl OutDir {
    pub fn create(root: &Path, command: &str, flags: BTreeMap<String, String>) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            flags,
            digest: None,
            started: now(),
            outputs: Vec::new(),
        })
    }

    pub fn set_digest(&mut self, digest: String) {
        self.digest = Some(digest);
    }

    pub fn write(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        fs::write(self.root.join(name), contents)?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            bytes: contents.len(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn finish(self) -> std::io::Result<Vec<String>> {
        let names: Vec<String> = self.outputs.iter().map(|o| o.path.clone()).collect();
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            flags: self.flags,
            scenario_digest: self.digest,
            timestamps: Timestamps { started: self.started, finished: now() },
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(names)
    }
}
