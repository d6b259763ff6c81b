//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys and
//! unparsable values are errors that name the offending key.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federated::{FedConfig, FedMethod, PartitionMode};
use crate::io::{bundled_mnist_paths, gen_synthetic, load_idx, split, SplitSpec, Splits, SyntheticSpec};
use crate::models::{Dataset, ModelKind};
use crate::privacy::{ClipMethod, ClipSpec};
use crate::subspace::{ProjectionMode, Segmentation};
use crate::trainer::{Method, Sampling, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// MNIST digits shipped with the crate.
    Mnist,
    /// IDX files named by `images` and `labels`.
    Idx,
    Synthetic,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DataSource::Mnist),
            "idx" => Ok(DataSource::Idx),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected mnist, idx or synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Logistic,
    Mlp,
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelName::Logistic),
            "mlp" => Ok(ModelName::Mlp),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected logistic or mlp)"
            ))),
        }
    }
}

/// Every recognised key, with its default. Field names are the config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub dataset: DataSource,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    pub synth_noise: f64,
    pub synth_anisotropy: f64,
    pub synth_samples: usize,
    pub private_size: usize,
    pub public_size: usize,
    pub holdout_size: usize,
    pub test_size: usize,

    pub model: ModelName,
    pub hidden: usize,

    pub method: Method,
    pub epochs: usize,
    pub lot_size: usize,
    pub lr: f64,
    pub clip: ClipMethod,
    pub clip_threshold: f64,
    pub clip_stabilizer: f64,
    pub sigma: f64,
    pub delta: f64,
    pub k: usize,
    pub interval: usize,
    pub projection: ProjectionMode,
    pub public_batch: usize,
    pub segmentation: Segmentation,
    pub sampling: Sampling,
    pub symmetrize: f64,
    pub rpdp_dim: usize,
    pub rsdp_keep: f64,
    pub epsilon_cap: Option<f64>,
    pub eval_every: Option<usize>,
    pub diagnose_skew: bool,
    pub seed: u64,

    pub fed_method: FedMethod,
    pub clients: usize,
    pub sampled: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub partition: PartitionMode,
    pub local_lot: usize,
    pub mu: f64,

    pub q: Option<f64>,
    pub steps: Option<usize>,

    pub checkpoint: Option<PathBuf>,
    pub dump_layers: Vec<String>,
    pub dump_samples: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DataSource::Mnist,
            images: None,
            labels: None,
            synth_classes: 2,
            synth_dim: 10,
            synth_separation: 4.0,
            synth_noise: 1.0,
            synth_anisotropy: 1.0,
            synth_samples: 1000,
            private_size: 2000,
            public_size: 100,
            holdout_size: 0,
            test_size: 2000,
            model: ModelName::Logistic,
            hidden: 64,
            method: Method::Pcdp,
            epochs: 20,
            lot_size: 50,
            lr: 1.0,
            clip: ClipMethod::Abadi,
            clip_threshold: 0.01,
            clip_stabilizer: 0.01,
            sigma: 14.0,
            delta: 1e-5,
            k: 100,
            interval: 1,
            projection: ProjectionMode::Layerwise,
            public_batch: 100,
            segmentation: Segmentation::Rbs,
            sampling: Sampling::Poisson,
            symmetrize: 0.0,
            rpdp_dim: 800,
            rsdp_keep: 0.3,
            epsilon_cap: None,
            eval_every: None,
            diagnose_skew: false,
            seed: 0,
            fed_method: FedMethod::Fedpcdp,
            clients: 10,
            sampled: 8,
            rounds: 30,
            local_steps: 5,
            lr_local: 1.0,
            lr_global: 1.0,
            partition: PartitionMode::Extreme,
            local_lot: 64,
            mu: 0.01,
            q: None,
            steps: None,
            checkpoint: None,
            dump_layers: Vec::new(),
            dump_samples: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override flag.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = parse(key, v)?,
            "images" => self.images = parse_opt(key, v)?,
            "labels" => self.labels = parse_opt(key, v)?,
            "synth_classes" => self.synth_classes = parse(key, v)?,
            "synth_dim" => self.synth_dim = parse(key, v)?,
            "synth_separation" => self.synth_separation = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "synth_anisotropy" => self.synth_anisotropy = parse(key, v)?,
            "synth_samples" => self.synth_samples = parse(key, v)?,
            "private_size" => self.private_size = parse(key, v)?,
            "public_size" => self.public_size = parse(key, v)?,
            "holdout_size" => self.holdout_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "model" => self.model = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "method" => self.method = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lot_size" => self.lot_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "clip_threshold" => self.clip_threshold = parse(key, v)?,
            "clip_stabilizer" => self.clip_stabilizer = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "interval" => self.interval = parse(key, v)?,
            "projection" => self.projection = parse(key, v)?,
            "public_batch" => self.public_batch = parse(key, v)?,
            "segmentation" => self.segmentation = parse(key, v)?,
            "sampling" => self.sampling = parse(key, v)?,
            "symmetrize" => self.symmetrize = parse(key, v)?,
            "rpdp_dim" => self.rpdp_dim = parse(key, v)?,
            "rsdp_keep" => self.rsdp_keep = parse(key, v)?,
            "epsilon_cap" => self.epsilon_cap = parse_opt(key, v)?,
            "eval_every" => self.eval_every = parse_opt(key, v)?,
            "diagnose_skew" => self.diagnose_skew = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "fed_method" => self.fed_method = parse(key, v)?,
            "clients" => self.clients = parse(key, v)?,
            "sampled" => self.sampled = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "local_steps" => self.local_steps = parse(key, v)?,
            "lr_local" => self.lr_local = parse(key, v)?,
            "lr_global" => self.lr_global = parse(key, v)?,
            "partition" => self.partition = parse(key, v)?,
            "local_lot" => self.local_lot = parse(key, v)?,
            "mu" => self.mu = parse(key, v)?,
            "q" => self.q = parse_opt(key, v)?,
            "steps" => self.steps = parse_opt(key, v)?,
            "checkpoint" => self.checkpoint = parse_opt(key, v)?,
            "dump_layers" => {
                self.dump_layers = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "dump_samples" => self.dump_samples = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn clip_spec(&self) -> Result<ClipSpec> {
        if self.clip == ClipMethod::None {
            return Ok(ClipSpec::none());
        }
        ClipSpec::new(self.clip, self.clip_threshold, self.clip_stabilizer)
            .map_err(|e| Error::Config(format!("key `clip_threshold`: {e}")))
    }

    pub fn model_kind(&self, data: &Dataset) -> ModelKind {
        match self.model {
            ModelName::Logistic => ModelKind::Logistic {
                features: data.feature_dim(),
                classes: data.classes(),
            },
            ModelName::Mlp => ModelKind::Mlp {
                features: data.feature_dim(),
                hidden: self.hidden,
                classes: data.classes(),
            },
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset {
            DataSource::Mnist => {
                let (images, labels) = bundled_mnist_paths();
                load_idx(&images, &labels)
            }
            DataSource::Idx => {
                let images = self.images.as_ref().ok_or_else(|| {
                    Error::Config("dataset = idx needs the `images` key".into())
                })?;
                let labels = self.labels.as_ref().ok_or_else(|| {
                    Error::Config("dataset = idx needs the `labels` key".into())
                })?;
                load_idx(images, labels)
            }
            DataSource::Synthetic => gen_synthetic(
                &SyntheticSpec {
                    classes: self.synth_classes,
                    feature_dim: self.synth_dim,
                    separation: self.synth_separation,
                    noise_std: self.synth_noise,
                    anisotropy: self.synth_anisotropy,
                    samples: self.synth_samples,
                },
                self.seed,
            )
            .map_err(|e| Error::Config(e.to_string())),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            private: self.private_size,
            public: self.public_size,
            holdout: self.holdout_size,
            test: self.test_size,
            seed: self.seed,
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        let data = self.load_dataset()?;
        split(&data, &self.split_spec()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self, kind: ModelKind) -> Result<TrainConfig> {
        if self.lot_size == 0 || self.lot_size > self.private_size {
            return Err(Error::Config(format!(
                "key `lot_size`: must be in 1..={}",
                self.private_size
            )));
        }
        if self.k == 0 || self.public_batch == 0 || self.interval == 0 {
            return Err(Error::Config(
                "keys `k`, `public_batch` and `interval` must be positive".into(),
            ));
        }
        if !(self.rsdp_keep > 0.0 && self.rsdp_keep <= 1.0) {
            return Err(Error::Config("key `rsdp_keep`: must be in (0, 1]".into()));
        }
        Ok(TrainConfig {
            method: self.method,
            model: kind,
            epochs: self.epochs,
            lot_size: self.lot_size,
            lr: self.lr,
            clip: self.clip_spec()?,
            sigma: self.sigma,
            delta: self.delta,
            k: self.k,
            interval: self.interval,
            projection_mode: self.projection,
            public_batch: self.public_batch,
            segmentation: self.segmentation,
            sampling: self.sampling,
            symmetrize: self.symmetrize,
            rpdp_dim: self.rpdp_dim,
            rsdp_keep: self.rsdp_keep,
            epsilon_cap: self.epsilon_cap,
            eval_every: self.eval_every,
            diagnose_skew: self.diagnose_skew,
            seed: self.seed,
        })
    }

    pub fn fed_config(&self, kind: ModelKind) -> Result<FedConfig> {
        let cfg = FedConfig {
            method: self.fed_method,
            model: kind,
            clients: self.clients,
            sampled: self.sampled,
            rounds: self.rounds,
            local_steps: self.local_steps,
            lr_local: self.lr_local,
            lr_global: self.lr_global,
            partition: self.partition,
            sigma: self.sigma,
            clip: self.clip_spec()?,
            local_lot: self.local_lot,
            delta: self.delta,
            k: self.k,
            mu: self.mu,
            symmetrize: self.symmetrize,
            public_batch: self.public_batch,
            segmentation: self.segmentation,
            projection_mode: self.projection,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(q, steps)` for the accountant: explicit keys, else derived from the
    /// centralized schedule.
    pub fn accountant_inputs(&self) -> Result<(f64, usize)> {
        if self.private_size == 0 || self.lot_size == 0 {
            return Err(Error::Config(
                "keys `private_size` and `lot_size` must be positive".into(),
            ));
        }
        let q = self
            .q
            .unwrap_or(self.lot_size as f64 / self.private_size as f64);
        let steps = self
            .steps
            .unwrap_or(self.epochs * self.private_size.div_ceil(self.lot_size));
        Ok((q, steps))
    }
}
