use std::path::{Path, PathBuf};

use anyhow::Context;
use sac::{ConfigError, EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// File locations. Relative paths are resolved against the directory of
/// the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_edges: Option<PathBuf>,
    pub test_edges: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub export_path: Option<PathBuf>,
}

/// One JSON document holding every module's settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into `train.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.train_edges,
            &mut cfg.paths.test_edges,
            &mut cfg.paths.checkpoint_dir,
            &mut cfg.paths.export_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        self.eval.validate()
    }
}

pub fn required<'a>(p: &'a Option<PathBuf>, name: &'static str) -> Result<&'a Path, ConfigError> {
    p.as_deref()
        .ok_or_else(|| ConfigError::new(name, "path is required for this command"))
}
