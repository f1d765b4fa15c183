use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Record of one invocation, written when the run starts and rewritten when
/// it ends. `argv` and `workdir` together re-execute the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub workdir: PathBuf,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    pub threads: usize,
    pub started_unix_ms: u128,
    pub wall_seconds: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
}

pub(crate) struct ManifestWriter {
    path: PathBuf,
    started: Instant,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    pub fn begin(out_dir: &Path, manifest: RunManifest) -> segfield::Result<Self> {
        let w = Self {
            path: out_dir.join(MANIFEST_FILE),
            started: Instant::now(),
            manifest,
        };
        w.write()?;
        Ok(w)
    }

    fn write(&self) -> segfield::Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&self.path, text).map_err(|e| segfield::Error::Io {
            path: self.path.clone(),
            source: e,
        })
    }

    pub fn finish(mut self, error: Option<String>) -> segfield::Result<()> {
        self.manifest.wall_seconds = Some(self.started.elapsed().as_secs_f64());
        self.manifest.status = if error.is_some() { RunStatus::Failed } else { RunStatus::Complete };
        self.manifest.error = error;
        self.write()
    }
}

pub(crate) fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}
