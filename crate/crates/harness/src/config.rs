//! TOML run configuration.
//!
//! Every field has a default, so a config file only needs the keys it changes.
//! `EMM_MNIST_DIR` overrides `stream.data_dir` for IDX sources.

use std::path::{Path, PathBuf};

use emm_core::hsic::{Bandwidth, KernelSpec};
use emm_core::mixture::Reference;
use emm_core::nn::AdamConfig;
use emm_core::{
    Direction, DropPolicy, ExpertConfig, HsicConfig, MixtureConfig, Pairing, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const DATA_DIR_ENV: &str = "EMM_MNIST_DIR";
pub const DEFAULT_DATA_DIR: &str = "/root/data/mnist";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Directory for events, report and checkpoints; nothing is written when unset.
    pub out: Option<PathBuf>,
    pub checkpoint: bool,
    pub stream: StreamConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "synthetic-2".into(),
            seeds: vec![0, 1, 2, 3, 4],
            out: None,
            checkpoint: false,
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub source: SourceKind,
    pub batch_size: usize,
    /// Delivers at most this many samples; the rest of the stream is skipped.
    pub limit: Option<usize>,

    // synthetic Gaussian modes
    pub modes: usize,
    pub dim: usize,
    /// Distance of each mode mean from the origin, in units of `scale`.
    pub separation: f64,
    pub scale: f64,
    pub per_mode: usize,
    pub test_per_mode: usize,

    // IDX split streams
    pub data_dir: PathBuf,
    pub classes_per_task: usize,
    /// Restricts training and test data to these classes.
    pub classes: Option<Vec<usize>>,
    /// 2×2 average pooling (28×28 → 14×14).
    pub downsample: bool,
    /// Shifts and scales features to zero mean and unit variance using the
    /// training split's global moments; the test split reuses them.
    pub standardize: bool,
    pub shuffle_within_segment: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Synthetic,
            batch_size: 10,
            limit: None,
            modes: 2,
            dim: 16,
            separation: 12.0,
            scale: 1.0,
            per_mode: 2500,
            test_per_mode: 500,
            data_dir: PathBuf::from(DEFAULT_DATA_DIR),
            classes_per_task: 2,
            classes: None,
            downsample: false,
            standardize: false,
            shuffle_within_segment: true,
        }
    }
}

impl StreamConfig {
    /// `data_dir` after applying the environment override.
    pub fn resolved_data_dir(&self) -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.data_dir.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthConfig {
    Fixed(f64),
    /// Only `"median"` is accepted.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lambda: f64,
    pub direction: Direction,
    pub pairing: Pairing,
    pub reference: Reference,
    pub hsic_samples: usize,
    pub bandwidth: BandwidthConfig,
    /// Multiplies the median-heuristic bandwidth.
    pub bandwidth_scale: f64,
    pub check_interval: usize,

    pub capacity: usize,
    pub drop_policy: DropPolicy,
    pub drop_count: usize,

    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_batches: Option<usize>,
    pub n_draws: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lambda: 0.07,
            direction: Direction::Above,
            pairing: Pairing::Source,
            reference: Reference::Snapshot,
            hsic_samples: 256,
            bandwidth: BandwidthConfig::Named("median".into()),
            bandwidth_scale: 1.0,
            check_interval: 1,
            capacity: 2000,
            drop_policy: DropPolicy::SlidingWindow,
            drop_count: 10,
            latent_dim: 8,
            vae_hidden: vec![64],
            classifier_hidden: vec![64, 64],
            lr: 1e-3,
            epochs: 1,
            minibatch: 32,
            max_batches: None,
            n_draws: 8,
        }
    }
}

impl ModelConfig {
    pub fn kernel(&self) -> Result<KernelSpec, HarnessError> {
        match &self.bandwidth {
            BandwidthConfig::Fixed(_) if self.bandwidth_scale != 1.0 => Err(HarnessError::Config(
                "bandwidth_scale only applies to the median bandwidth".into(),
            )),
            BandwidthConfig::Fixed(s) => Ok(KernelSpec::Rbf {
                bandwidth: Bandwidth::Fixed(*s),
            }),
            BandwidthConfig::Named(n) if n == "median" && self.bandwidth_scale == 1.0 => {
                Ok(KernelSpec::RBF_MEDIAN)
            }
            BandwidthConfig::Named(n) if n == "median" => Ok(KernelSpec::Rbf {
                bandwidth: Bandwidth::ScaledMedian(self.bandwidth_scale),
            }),
            BandwidthConfig::Named(n) => Err(HarnessError::Config(format!(
                "bandwidth must be a number or \"median\", got {n:?}"
            ))),
        }
    }

    pub fn mixture(&self, input_dim: usize, num_classes: usize) -> Result<MixtureConfig, HarnessError> {
        Ok(MixtureConfig {
            expert: ExpertConfig {
                input_dim,
                vae_hidden: self.vae_hidden.clone(),
                latent_dim: self.latent_dim,
                classifier_hidden: self.classifier_hidden.clone(),
                num_classes,
                adam: AdamConfig {
                    lr: self.lr,
                    ..AdamConfig::default()
                },
            },
            train: TrainConfig {
                epochs: self.epochs,
                minibatch: self.minibatch,
                max_batches: self.max_batches,
            },
            hsic: HsicConfig {
                samples: self.hsic_samples,
                kernel: self.kernel()?,
                pairing: self.pairing,
            },
            lambda: self.lambda,
            direction: self.direction,
            reference: self.reference,
            capacity: self.capacity,
            drop_policy: self.drop_policy,
            drop_count: self.drop_count,
            n_draws: self.n_draws,
            check_interval: self.check_interval,
        })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        let s = &self.stream;
        if s.batch_size == 0 {
            return Err(HarnessError::Config("stream.batch_size must be ≥ 1".into()));
        }
        if s.source == SourceKind::Synthetic && (s.modes == 0 || s.per_mode == 0 || s.test_per_mode == 0) {
            return Err(HarnessError::Config(
                "synthetic streams need modes, per_mode and test_per_mode ≥ 1".into(),
            ));
        }
        self.model.kernel()?;
        // remaining checks need the data dimensions; run them with placeholders
        self.model.mixture(1, 1)?.validate()?;
        Ok(())
    }
}
