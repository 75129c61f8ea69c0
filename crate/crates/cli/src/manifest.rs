use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tda::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the run directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub command: String,
    pub args: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Record of everything a run directory holds and how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: Config,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub artifacts: Vec<Artifact>,
    pub invocations: Vec<Invocation>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(run_dir: &Path, config: Config) -> Self {
        let name = run_dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_owned();
        let t = now_unix();
        Self {
            run_id: format!("{name}-{t}"),
            seed: config.training.seed,
            config,
            created_unix: t,
            updated_unix: t,
            artifacts: Vec::new(),
            invocations: Vec::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let p = run_dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?,
        ))
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<()> {
        self.updated_unix = now_unix();
        let p = run_dir.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", p.display()))
    }

    /// Adds or re-labels an artifact; each path appears once.
    pub fn record(&mut self, run_dir: &Path, kind: &str, path: &Path) {
        let rel = path.strip_prefix(run_dir).unwrap_or(path).to_path_buf();
        match self.artifacts.iter_mut().find(|a| a.path == rel) {
            Some(a) => a.kind = kind.to_owned(),
            None => self.artifacts.push(Artifact {
                kind: kind.to_owned(),
                path: rel,
            }),
        }
    }

    /// Drops artifacts whose files no longer exist.
    pub fn prune(&mut self, run_dir: &Path) {
        self.artifacts.retain(|a| run_dir.join(&a.path).exists());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifacts_are_recorded_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(dir.path(), Config::default());
        let p = dir.path().join("history.csv");
        m.record(dir.path(), "history", &p);
        m.record(dir.path(), "history", &p);
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts[0].path, PathBuf::from("history.csv"));
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap().unwrap(), m);
    }
}
