//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
/// Effective config, loadable again with `--config`.
pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock seconds; the only nondeterministic values of a run.
    pub timings: BTreeMap<String, Value>,
    pub started_unix: f64,
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    start: Instant,
    started_unix: f64,
    pub seeds: BTreeMap<String, u64>,
    pub timings: BTreeMap<String, Value>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("{}: cannot create run directory", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            start: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            seeds: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.to_string(), v);
    }

    pub fn time(&mut self, name: &str, secs: f64) {
        self.timings.insert(name.to_string(), Value::from(secs));
    }

    /// Writes the config snapshot and the manifest with checksums of every
    /// file under the run directory.
    pub fn finish(mut self, config: &impl Serialize) -> Result<Manifest> {
        let config = serde_json::to_value(config)?;
        let snap = self.path(CONFIG_SNAPSHOT);
        std::fs::write(&snap, serde_json::to_string_pretty(&config)? + "\n")
            .with_context(|| format!("{}", snap.display()))?;
        let mut files = Vec::new();
        collect_files(&self.root, &self.root, &mut files)?;
        files.sort();
        let mut artifacts = Vec::with_capacity(files.len());
        for rel in files {
            let bytes = std::fs::read(self.root.join(&rel)).with_context(|| rel.clone())?;
            artifacts.push(Artifact {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let total = self.start.elapsed().as_secs_f64();
        self.time("total", total);
        let manifest = Manifest {
            tool: "pcsr".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            argv: std::env::args().collect(),
            config,
            seeds: self.seeds,
            artifacts,
            timings: self.timings,
            started_unix: self.started_unix,
        };
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("{}", path.display()))?;
        Ok(manifest)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("{}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.push(rel);
            }
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("{}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid manifest", path.display()))
}
