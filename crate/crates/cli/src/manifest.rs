use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use delib_core::io::write_atomic;
use serde::Serialize;

pub const FILE_NAME: &str = "manifest.json";

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub build: String,
    pub started_unix: u64,
    pub wall_time_s: f64,
}

pub struct ManifestBuilder {
    subcommand: &'static str,
    seed: u64,
    started: Instant,
    started_unix: u64,
    config: serde_json::Value,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(subcommand: &'static str, seed: u64) -> Self {
        ManifestBuilder {
            subcommand,
            seed,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config: serde_json::Value::Null,
            artifacts: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn artifacts(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.artifacts.extend(paths);
    }

    pub fn finish(self, dir: &Path) -> delib_core::Result<PathBuf> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            config: self.config,
            seed: self.seed,
            artifacts: self.artifacts,
            build: build_id(),
            started_unix: self.started_unix,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join(FILE_NAME);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

/// Package version plus the commit hash when run inside a git checkout.
fn build_id() -> String {
    let version = env!("CARGO_PKG_VERSION");
    let commit = Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match commit {
        Some(c) => format!("{version}+{c}"),
        None => version.to_string(),
    }
}
