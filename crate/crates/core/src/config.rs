//! Run configuration: a single TOML document with `[model]`, `[train]`, and
//! `[data]` tables. Every field has a default, so an empty file is a valid
//! (if small) run description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, SliceSample};
use crate::error::{Error, Result};
use crate::kspace::SamplingMask;
use crate::network::ModelConfig;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

/// Environment variable consulted when `data.dir` is not set; it names the
/// directory that relative volume paths and dataset directories resolve
/// against.
pub const DATA_DIR_ENV: &str = "HIFI_DATA_DIR";

/// Where training/evaluation examples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Synthetic ellipse phantoms generated on the fly.
    Phantom,
    /// Slices ingested from HDF5 volumes on disk.
    Volumes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Number of phantoms to generate (`kind = "phantom"`).
    pub n: usize,
    /// Phantom side length in pixels (`kind = "phantom"`).
    pub size: usize,
    /// Dataset root. When absent, the `HIFI_DATA_DIR` environment variable
    /// is consulted; relative volume paths resolve against whichever is set.
    pub dir: Option<PathBuf>,
    /// HDF5 volume files (`kind = "volumes"`), absolute or relative to the
    /// dataset root.
    pub volumes: Vec<PathBuf>,
    /// Slices dropped from each end of every ingested volume.
    pub slice_trim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Phantom,
            n: 32,
            size: 64,
            dir: None,
            volumes: Vec::new(),
            slice_trim: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DataKind::Phantom => {
                if self.n < 2 {
                    return Err(Error::Config(format!(
                        "phantom data needs n >= 2 to split train/val, got {}",
                        self.n
                    )));
                }
                if self.size < 32 || self.size % 2 != 0 {
                    return Err(Error::Config(format!(
                        "phantom size must be even and at least 32, got {}",
                        self.size
                    )));
                }
            }
            DataKind::Volumes => {
                if self.volumes.is_empty() {
                    return Err(Error::Config(
                        "kind = \"volumes\" requires at least one entry in volumes".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The dataset root: the explicit `dir` field if present, otherwise the
    /// `HIFI_DATA_DIR` environment variable if set.
    pub fn resolve_dir(&self) -> Option<PathBuf> {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    /// Absolute paths stand alone; relative ones are joined onto the
    /// resolved dataset root (or used as-is when no root is configured).
    pub fn resolve_volume(&self, v: &Path) -> PathBuf {
        if v.is_absolute() {
            return v.to_path_buf();
        }
        match self.resolve_dir() {
            Some(root) => root.join(v),
            None => v.to_path_buf(),
        }
    }

    /// Materializes the configured source into samples sharing one mask.
    pub fn build_dataset(
        &self,
        af: usize,
        center_fraction: f64,
        seed: u64,
    ) -> Result<(SamplingMask, Vec<SliceSample>)> {
        self.validate()?;
        match self.kind {
            DataKind::Phantom => data::phantom_dataset(self.n, self.size, seed, af, center_fraction),
            DataKind::Volumes => {
                let mut images: Vec<(String, Tensor)> = Vec::new();
                for v in &self.volumes {
                    let path = self.resolve_volume(v);
                    images.extend(data::ingest_volume(&path, self.slice_trim)?);
                }
                data::build_samples(images, af, center_fraction, seed)
            }
        }
    }
}

/// Everything one run needs, as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("toml: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        // The data source must produce grids the model can embed.
        if self.data.kind == DataKind::Phantom {
            self.model.validate_dims(self.data.size, self.data.size)?;
        }
        Ok(())
    }
}
