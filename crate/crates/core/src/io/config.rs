use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fusion::FusionMode;
use crate::synthdata::GeneratorConfig;
use crate::trainer::HyperParams;

use super::IoError;

/// Everything needed to rerun an experiment. Missing fields take defaults;
/// unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub hyper: HyperParams,
    pub modes: Vec<FusionMode>,
    /// Training seeds for `ablate`; `train` uses `hyper.seed`.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub export_gates: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            hyper: HyperParams::default(),
            modes: vec![FusionMode::Ca, FusionMode::Dca],
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("out"),
            export_gates: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::fs(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks nested invariants. Directory writability is checked by
    /// [`ExperimentConfig::prepare_output_dir`].
    pub fn validate(&self) -> Result<(), IoError> {
        self.generator
            .validate()
            .map_err(|e| IoError::Config(e.to_string()))?;
        self.hyper
            .validate()
            .map_err(|e| IoError::Config(e.to_string()))?;
        if self.modes.is_empty() {
            return Err(IoError::Config("modes must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(IoError::Config("seeds must not be empty".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(IoError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Creates `output_dir` if needed and verifies it accepts files.
    pub fn prepare_output_dir(&self) -> Result<&Path, IoError> {
        let dir = self.output_dir.as_path();
        std::fs::create_dir_all(dir).map_err(|e| IoError::fs(dir, e))?;
        let probe = dir.join(".write-probe");
        std::fs::write(&probe, b"").map_err(|e| IoError::fs(&probe, e))?;
        std::fs::remove_file(&probe).map_err(|e| IoError::fs(&probe, e))?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.hyper.learning_rate = 0.123456789012345;
        cfg.generator.corruption_rate = 0.3;
        cfg.modes = vec![FusionMode::Dca];
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"hyper": {"lr": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"modes": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"modes": ["xa"]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"hyper": {"momentum": 1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"generator": {"corruption_rate": 2}}"#).is_err());
    }
}
