//! The single JSON document that drives a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dirsearch::TrainConfig;
use crate::evalkit::EvalConfig;
use crate::scenegen::GeneratorConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.eval;
        for (name, v) in [
            ("eval.n_scenes", e.n_scenes),
            ("eval.n_distinction", e.n_distinction),
            ("eval.inversion_restarts", e.inversion_restarts),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if e.n_shift < 64 {
            return Err(Error::Config(format!("eval.n_shift must be >= 64, got {}", e.n_shift)));
        }
        if !(e.inversion_lr > 0.0) {
            return Err(Error::Config("eval.inversion_lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
