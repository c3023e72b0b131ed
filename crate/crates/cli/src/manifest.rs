use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `git rev-parse --short HEAD` of the working directory, with a `-dirty`
/// suffix for uncommitted changes; the crate version outside a checkout.
pub fn revision() -> String {
    let git = |args: &[&str]| {
        std::process::Command::new("git")
            .args(args)
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
    };
    match git(&["rev-parse", "--short", "HEAD"]) {
        Some(rev) if !rev.is_empty() => {
            let dirty = git(&["status", "--porcelain", "--untracked-files=no"]).is_some_and(|s| !s.is_empty());
            if dirty {
                format!("{rev}-dirty")
            } else {
                rev
            }
        }
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

impl RunManifest {
    pub fn start(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            revision: revision(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
            failed_stage: None,
            error: None,
        }
    }

    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(MANIFEST_DIR).join(format!("{command}.json"))
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = Self::path(out, &self.command);
        std::fs::create_dir_all(path.parent().expect("manifest has a parent"))?;
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
