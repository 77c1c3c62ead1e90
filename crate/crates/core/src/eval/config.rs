//! Experiment configuration shared by the drivers and the command line.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::Strategy;
use crate::error::{Error, Result};
use crate::eval::data::SyntheticConfig;
use crate::models::{Architecture, TrainConfig, DEFAULT_BUDGET, DEFAULT_DROPOUT};

/// Window length and overlap of one segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub seconds: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveSettings {
    pub strategies: Vec<Strategy>,
    pub models: Vec<Architecture>,
    pub seeds: Vec<u64>,
    pub window: WindowConfig,
}

impl Default for ActiveSettings {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Random, Strategy::Margin],
            models: vec![Architecture::Cnn1d, Architecture::Lstm],
            seeds: (1..=5).collect(),
            window: WindowConfig {
                seconds: 10.0,
                overlap: 0.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub models: Vec<Architecture>,
    pub window_seconds: Vec<f64>,
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub budget: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            models: vec![
                Architecture::Cnn1d,
                Architecture::Lstm,
                Architecture::SelfAttention,
                Architecture::JrpCnn,
            ],
            window_seconds: vec![5.0, 10.0, 50.0],
            batch_size: 5,
            repetitions: 100,
            warmup: 10,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory of trace CSVs; synthetic data is generated when absent.
    pub dataset: Option<PathBuf>,
    /// Ground-truth labeled traces for the annotation densities; defaults
    /// to `dataset` itself.
    pub reference: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub windows: Vec<WindowConfig>,
    pub models: Vec<Architecture>,
    pub folds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub budget: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub active: ActiveSettings,
    pub bench: BenchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            reference: None,
            synthetic: SyntheticConfig::default(),
            windows: vec![WindowConfig {
                seconds: 10.0,
                overlap: 0.0,
            }],
            models: vec![
                Architecture::Cnn1d,
                Architecture::Lstm,
                Architecture::SelfAttention,
                Architecture::JrpCnn,
            ],
            folds: 5,
            seed: 0,
            output_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
            budget: Some(DEFAULT_BUDGET),
            dropout_rate: Some(DEFAULT_DROPOUT),
            active: ActiveSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        for w in self.windows.iter().chain([&self.active.window]) {
            if !(0.0..1.0).contains(&w.overlap) {
                return Err(Error::Config(format!(
                    "overlap {} outside [0, 1)",
                    w.overlap
                )));
            }
            if !(w.seconds > 0.0) {
                return Err(Error::Config(format!(
                    "window length {} s must be positive",
                    w.seconds
                )));
            }
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        if self.bench.batch_size == 0 || self.bench.repetitions == 0 {
            return Err(Error::Config(
                "benchmark batch and repetitions must be positive".into(),
            ));
        }
        self.train.validate()
    }
}
