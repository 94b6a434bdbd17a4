//! Experiment configuration: one JSON document wiring every module together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use msnas::data::{load_binary_batches, synthetic_dataset, Dataset};
use msnas::error::{Error, Result};
use msnas::evaldb::MetricConfig;
use msnas::evo::EvoConfig;
use msnas::predictor::PredictorConfig;
use msnas::supernet::SearchSpaceConfig;
use msnas::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Procedural oriented-grating classification set.
    Synthetic {
        classes: usize,
        train_size: usize,
        test_size: usize,
        image_size: usize,
        channels: usize,
    },
    /// Binary batches: 1 label byte + channel-major u8 pixels per record.
    Binary {
        train_paths: Vec<PathBuf>,
        test_paths: Vec<PathBuf>,
        image_size: usize,
        channels: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbConfig {
    pub num_archs: usize,
    pub num_images: usize,
    pub batch_size: usize,
}

impl Default for DbConfig {
    fn default() -> Self {
        DbConfig { num_archs: 300, num_images: 2000, batch_size: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub search_space: SearchSpaceConfig,
    pub train: TrainConfig,
    pub metric: MetricConfig,
    #[serde(default)]
    pub evo: EvoConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub db: DbConfig,
    pub dataset: DatasetConfig,
    /// Threshold grid; the built-in 0.00..=1.00 step 0.05 plus sentinel
    /// grid applies when omitted.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.search_space.validate()?;
        self.train.validate()?;
        self.metric.validate()?;
        self.evo.validate()?;
        self.predictor.validate()?;
        match &self.dataset {
            DatasetConfig::Synthetic { classes, train_size, test_size, image_size, channels } => {
                if *classes != self.search_space.num_classes {
                    return Err(Error::Config(
                        "dataset classes must match the search space".into(),
                    ));
                }
                if *train_size == 0 || *test_size == 0 || *image_size == 0 || *channels == 0 {
                    return Err(Error::Config("empty synthetic dataset".into()));
                }
                self.check_resolution(*image_size, *channels)?;
            }
            DatasetConfig::Binary { train_paths, test_paths, image_size, channels } => {
                for p in train_paths.iter().chain(test_paths) {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "dataset path does not exist: {}",
                            p.display()
                        )));
                    }
                }
                self.check_resolution(*image_size, *channels)?;
            }
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("grid must be non-empty and ascending".into()));
            }
        }
        Ok(())
    }

    fn check_resolution(&self, image_size: usize, channels: usize) -> Result<()> {
        let max_res = *self.search_space.resolution_pool.last().unwrap();
        if max_res > image_size {
            return Err(Error::Config(format!(
                "max resolution {max_res} exceeds dataset image size {image_size}"
            )));
        }
        if channels != self.search_space.image_channels {
            return Err(Error::Config("dataset channels must match the search space".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        self.grid.clone().unwrap_or_else(msnas::evaldb::default_grid)
    }

    /// Deterministic sub-seeds so every module draws from its own stream.
    pub fn seed_for(&self, purpose: SeedPurpose) -> u64 {
        self.seed.wrapping_add(match purpose {
            SeedPurpose::SupernetInit => 0x01,
            SeedPurpose::Training => 0x1000,
            SeedPurpose::DataGen => 0x2000,
            SeedPurpose::DbArchSampling => 0x3000,
            SeedPurpose::DbImageSampling => 0x4000,
            SeedPurpose::Predictor => 0x5000,
            SeedPurpose::Evolution => 0x6000,
        })
    }

    pub fn load_train_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, train_size, image_size, channels, .. } => {
                Ok(synthetic_dataset(
                    *classes,
                    *train_size,
                    *image_size,
                    *channels,
                    self.seed_for(SeedPurpose::DataGen),
                ))
            }
            DatasetConfig::Binary { train_paths, image_size, channels, .. } => {
                load_binary_batches(train_paths, *channels, *image_size)
            }
        }
    }

    pub fn load_test_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, test_size, image_size, channels, .. } => {
                Ok(synthetic_dataset(
                    *classes,
                    *test_size,
                    *image_size,
                    *channels,
                    self.seed_for(SeedPurpose::DataGen).wrapping_add(0x99),
                ))
            }
            DatasetConfig::Binary { test_paths, image_size, channels, .. } => {
                load_binary_batches(test_paths, *channels, *image_size)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SeedPurpose {
    SupernetInit,
    Training,
    DataGen,
    DbArchSampling,
    DbImageSampling,
    Predictor,
    Evolution,
}
