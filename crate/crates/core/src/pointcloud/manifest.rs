//! Dataset manifests: a TOML file listing geometry files, labels and splits.
//!
//! ```toml
//! classes = ["elongated_box", "l_shape", "cone"]
//!
//! [[sample]]
//! path = "train/elongated_box_000.off"
//! label = 0
//! split = "train"
//! rotation = [1.0, 0.0, 0.0, 0.0]   # optional ground-truth orientation
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QecError, Result};
use crate::quat::UnitQuaternion;

use super::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 4]>,
}

impl ManifestEntry {
    pub fn rotation(&self) -> Option<UnitQuaternion> {
        self.rotation.map(UnitQuaternion::from_array)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(rename = "sample", default)]
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses and validates; sample paths come back absolute (or relative
    /// to the current directory if the manifest path was).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| QecError::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        m.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in &mut m.samples {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(QecError::Config("manifest lists no classes".into()));
        }
        for s in &self.samples {
            if s.label >= self.classes.len() {
                return Err(QecError::BadTarget {
                    target: s.label,
                    classes: self.classes.len(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| QecError::Config(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}
