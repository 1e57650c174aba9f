use std::path::{Path, PathBuf};

use qec_core::capsnet::train::TrainConfig;
use qec_core::capsnet::NetworkConfig;
use qec_core::{QecError, Result};
use serde::{Deserialize, Serialize};

/// Everything `train` needs, read from a TOML file. Unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Run log location; defaults to the checkpoint path with `.jsonl`.
    pub run_log: Option<PathBuf>,
    /// Validation clouds are also scored after a random rotation.
    pub rotate_validation: bool,
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| QecError::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::parse(Path::new("x.toml"), &text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(Path::new("x.toml"), "[train]\nepochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, QecError::Parse { line: 3, .. }), "{err}");
        assert!(RunConfig::parse(Path::new("x.toml"), "bogus = 1").is_err());
    }

    #[test]
    fn partial_config() {
        let c = RunConfig::parse(Path::new("x.toml"), "[network]\nclasses = 10\ncenters = 64\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.network.layers[1].outputs, 10);
    }
}
