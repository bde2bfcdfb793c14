//! Run configuration for the command-line driver: one TOML file describing
//! where data and outputs live plus the full training/evaluation protocol.
//! Every field has a default, so an empty file is a valid configuration and
//! a file only needs to name what it overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ToyProtocol;

/// Seed and output location of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Base seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Directory receiving checkpoints, reports, and the manifest.
    pub dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Where the synthesized dataset lives on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory holding the face set and the occluder textures; `synth`
    /// writes it, every other subcommand reads it.
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("data"),
        }
    }
}

/// The whole configuration file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    /// Dataset sizes, trunk/generator/finetune hyper-parameters, dictionary
    /// threshold, and evaluation split sizes.
    pub protocol: ToyProtocol,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::invalid_argument(format!("bad config {path:?}: {e}")))?;
        config.protocol.validate()?;
        Ok(config)
    }

    /// The configuration rendered as TOML, defaults included — a template
    /// for hand editing.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Path of the face-set manifest inside the data directory.
    pub fn faces_manifest(&self) -> PathBuf {
        self.data.dir.join("faces").join("faces.json")
    }

    /// Path of the occluder-corpus index inside the data directory.
    pub fn textures_index(&self) -> PathBuf {
        self.data.dir.join("textures").join("textures.json")
    }
}
