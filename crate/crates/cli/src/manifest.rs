use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// The configuration of the most recent invocation.
    pub config: serde_json::Value,
    /// Keyed by stage, with a `/seed-N` suffix for per-seed stages.
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    pub seconds: f64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let bytes =
            fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Write through a sibling temporary file and rename it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
    }

    /// True when `stage` last completed with the same inputs and its outputs are still there.
    pub fn is_current(&self, stage: &str, input_hash: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|r| r.input_hash == input_hash && r.outputs.iter().all(|p| p.exists()))
    }

    pub fn record(
        &mut self,
        stage: &str,
        input_hash: String,
        seconds: f64,
        outputs: Vec<PathBuf>,
        metrics: serde_json::Value,
    ) {
        let finished_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                input_hash,
                seconds,
                finished_unix,
                outputs,
                metrics,
            },
        );
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn blob_hash(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", data.len()).as_bytes());
    h.update(data);
    hex(&h.finalize())
}

/// Content hash over labelled blobs, in the manner of a git tree: each entry is
/// hashed as a blob and the tree hash covers the sorted `label hash` lines.
#[derive(Debug, Default)]
pub struct InputHasher {
    entries: BTreeMap<String, String>,
}

impl InputHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, label: &str, data: &[u8]) -> &mut Self {
        self.entries.insert(label.to_string(), blob_hash(data));
        self
    }

    pub fn json<T: Serialize>(&mut self, label: &str, value: &T) -> &mut Self {
        let data = serde_json::to_vec(value).expect("hashable value serializes");
        self.bytes(label, &data)
    }

    pub fn file(&mut self, label: &str, path: &Path) -> Result<&mut Self> {
        let data = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(self.bytes(label, &data))
    }

    /// Every regular file below `dir`, labelled by its relative path.
    pub fn dir(&mut self, label: &str, dir: &Path) -> Result<&mut Self> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).with_context(|| format!("hashing {}", d.display()))? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path
                        .strip_prefix(dir)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .replace('\\', "/");
                    self.file(&format!("{label}/{rel}"), &path)?;
                }
            }
        }
        Ok(self)
    }

    pub fn finish(&self) -> String {
        let mut h = Sha256::new();
        for (label, hash) in &self.entries {
            h.update(format!("{label} {hash}\n").as_bytes());
        }
        hex(&h.finalize())
    }
}
