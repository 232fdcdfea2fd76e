//! Run manifests: the full config plus `meta.*` provenance lines.
//!
//! A manifest is itself a valid config file (the loader skips `meta.*`).

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.txt";

pub struct Manifest<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    /// Extra `meta.<key>` lines (inputs that are not config keys).
    pub meta: Vec<(&'static str, String)>,
    /// Files written by the command, relative to the manifest.
    pub artifacts: Vec<String>,
}

impl Manifest<'_> {
    pub fn render(&self) -> String {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut s = String::new();
        let _ = writeln!(s, "meta.command={}", self.command);
        let _ = writeln!(s, "meta.version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "meta.created_unix={created}");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k}={v}");
        }
        let _ = writeln!(s, "meta.artifacts={}", self.artifacts.join(","));
        for (k, v) in self.config.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.render()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
