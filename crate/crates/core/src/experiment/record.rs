use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{io_err, Result};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Provenance of one subcommand invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_fingerprint: String,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<PathBuf>,
}

/// Open record; call [`RunTimer::finish`] once the artifacts exist.
#[derive(Debug, Clone)]
pub struct RunTimer {
    command: String,
    fingerprint: String,
    started: DateTime<Utc>,
}

impl RunTimer {
    pub fn start(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            fingerprint: config.fingerprint(),
            started: Utc::now(),
        }
    }

    pub fn finish(self, artifacts: Vec<PathBuf>) -> RunRecord {
        RunRecord {
            command: self.command,
            config_fingerprint: self.fingerprint,
            code_version: CODE_VERSION.to_string(),
            started: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            artifacts,
        }
    }
}

impl RunRecord {
    /// Writes `run_<command>.json` under `reports_dir` and returns its path.
    pub fn write(&self, reports_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(reports_dir).map_err(io_err(reports_dir))?;
        let path = reports_dir.join(format!("run_{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(io_err(&path))?;
        Ok(path)
    }
}
