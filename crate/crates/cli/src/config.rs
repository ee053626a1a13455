//! Project configuration file (TOML).
//!
//! Every section is optional. Relative paths are taken relative to the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use machsim_core::backbone::SYNTHETIC_ID;
use machsim_core::dataset::SamplerConfig;
use machsim_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub refs_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub id: String,
    /// Weights directory for backbones that need one.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            id: SYNTHETIC_ID.to_owned(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Distortion library file; the bundled library when unset.
    pub library: Option<PathBuf>,
    /// Voter pool file; the built-in desk pool when unset.
    pub voters: Option<PathBuf>,
    pub paths: Paths,
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.library);
        fix(&mut self.voters);
        fix(&mut self.paths.refs_dir);
        fix(&mut self.paths.cache_dir);
        fix(&mut self.paths.output_dir);
        fix(&mut self.backbone.weights);
    }

    /// Input files and directories must exist; output and cache directories
    /// are created on demand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inputs = [
            ("library", &self.library),
            ("voters", &self.voters),
            ("paths.refs_dir", &self.paths.refs_dir),
            ("backbone.weights", &self.backbone.weights),
        ];
        for (key, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::Invalid(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        self.sampler
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
