use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    /// Written when the run starts; outputs next to it are partial.
    Incomplete,
    Complete,
    /// The run stopped with an error; outputs next to it are partial.
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub version: String,
    pub started: String,
    pub finished: Option<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// One run's manifest, rewritten on every status change.
pub struct Run {
    path: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(command: &str, out_dir: &Path, config: serde_json::Value, seed: Option<u64>) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let run = Self {
            path: out_dir.join(MANIFEST_FILE),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                status: RunStatus::Incomplete,
                error: None,
                config,
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                started: now(),
                finished: None,
            },
        };
        run.write()?;
        Ok(run)
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.manifest.inputs.insert(key.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, key: &str, path: &Path) {
        self.manifest.outputs.insert(key.to_string(), path.to_path_buf());
    }

    fn write(&self) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    /// Record the outcome and pass `result` through.
    pub fn finish(mut self, result: anyhow::Result<()>) -> anyhow::Result<()> {
        self.manifest.finished = Some(now());
        match &result {
            Ok(()) => self.manifest.status = RunStatus::Complete,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        if let Err(e) = self.write() {
            log::error!("{e:#}");
        }
        result
    }
}
