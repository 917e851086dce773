use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shadowad::adversarial::TrainConfig;
use shadowad::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// File name of the echoed config inside a run directory.
pub const ECHO_FILE: &str = "config.json";

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Training run description. `train` carries the optimizer, loss weights and
/// both network configs; `data` may be overridden on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Dataset directory in the `images/` + `masks/` layout.
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
