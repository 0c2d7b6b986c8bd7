//! The flat `key = value` run configuration shared by every stage.
//!
//! ```text
//! # desk-scale run
//! seed = 7
//! out = runs/desk
//! dataset.identities = 256
//! dataset.views = 0, 30
//! train.epochs = 30
//! loss.temperature = 4
//! ```
//!
//! Unknown keys are rejected; missing keys keep their defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::synth::dataset::sha256_hex;
use crate::synth::{DatasetSpec, DemographicConfig, NUM_PSPI_CLASSES};
use crate::train::{LossWeights, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Its `seed` always equals the run seed.
    pub dataset: DatasetSpec,
    /// `image_size` follows the dataset resolution; `channels` is set per role.
    pub model: ModelConfig,
    /// Its `seed` always equals the run seed.
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Fraction of subjects reserved for the final test set.
    pub test_fraction: f64,
    pub thresholds: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut dataset = DatasetSpec::new(256, 4, vec![0.0], 0);
        dataset.resolution = 64;
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/painforge"),
            model: ModelConfig::tiny(dataset.resolution, 3),
            dataset,
            train: TrainConfig {
                epochs: 30,
                freeze_epochs: 1,
                lr_backbone: 3e-4,
                lr_heads: 3e-3,
                ..TrainConfig::default()
            },
            loss: LossWeights::default(),
            test_fraction: 0.2,
            thresholds: vec![2, 3],
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    parse_list::<usize>(key, v)?
        .try_into()
        .map_err(|l: Vec<usize>| Error::Config(format!("{key}: expected {N} values, got {}", l.len())))
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses the flat format over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {}", i + 1, k.trim())));
            }
        }
        let mut c = RunConfig::default();
        for (k, v) in &map {
            c.set(k, v)?;
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.train;
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "test_fraction" => self.test_fraction = parse_value(key, v)?,
            "thresholds" => self.thresholds = parse_list(key, v)?,
            "dataset.identities" => d.identities = parse_value(key, v)?,
            "dataset.expressions" => d.expressions_per_identity = parse_value(key, v)?,
            "dataset.views" => d.views = parse_list(key, v)?,
            "dataset.resolution" => d.resolution = parse_value(key, v)?,
            "dataset.pspi_distribution" => {
                d.pspi_distribution = if v == "uniform" {
                    vec![1.0 / NUM_PSPI_CLASSES as f64; NUM_PSPI_CLASSES]
                } else {
                    parse_list(key, v)?
                }
            }
            "dataset.demographics.age" => demographics(&mut d.demographics).age = parse_array(key, v)?,
            "dataset.demographics.ethnicity" => {
                demographics(&mut d.demographics).ethnicity = parse_array(key, v)?
            }
            "dataset.demographics.gender" => demographics(&mut d.demographics).gender = parse_array(key, v)?,
            "model.patch_size" => m.patch_size = parse_value(key, v)?,
            "model.hidden_dim" => m.hidden_dim = parse_value(key, v)?,
            "model.num_layers" => m.num_layers = parse_value(key, v)?,
            "model.num_heads" => m.num_heads = parse_value(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_value(key, v)?,
            "model.dropout" => m.dropout_p = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.freeze_epochs" => t.freeze_epochs = parse_value(key, v)?,
            "train.lr_backbone" => t.lr_backbone = parse_value(key, v)?,
            "train.lr_heads" => t.lr_heads = parse_value(key, v)?,
            "train.floor_fraction" => t.floor_fraction = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, v)?,
            "train.beta1" => t.beta1 = parse_value(key, v)?,
            "train.beta2" => t.beta2 = parse_value(key, v)?,
            "train.val_fraction" => t.val_fraction = parse_value(key, v)?,
            "loss.pspi" => l.pspi = parse_value(key, v)?,
            "loss.au" => l.au = parse_value(key, v)?,
            "loss.pspi_distill" => l.pspi_distill = parse_value(key, v)?,
            "loss.au_distill" => l.au_distill = parse_value(key, v)?,
            "loss.feature_distill" => l.feature_distill = parse_value(key, v)?,
            "loss.temperature" => l.temperature = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Propagates the run seed and resolution into the stage configs.
    pub fn sync(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.model.image_size = self.dataset.resolution;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| t == 0 || t > 16) {
            return Err(Error::Config(format!("thresholds {:?} must be in 1..=16", self.thresholds)));
        }
        Ok(())
    }

    /// The flat format with every key present, in a fixed order.
    pub fn to_flat(&self) -> String {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("out = {}", self.out.display()),
            format!("test_fraction = {}", self.test_fraction),
            format!("thresholds = {}", join(&self.thresholds)),
            format!("dataset.identities = {}", d.identities),
            format!("dataset.expressions = {}", d.expressions_per_identity),
            format!("dataset.views = {}", join(&d.views)),
            format!("dataset.resolution = {}", d.resolution),
            format!("dataset.pspi_distribution = {}", join(&d.pspi_distribution)),
        ];
        if let Some(demo) = &d.demographics {
            lines.push(format!("dataset.demographics.age = {}", join(&demo.age)));
            lines.push(format!("dataset.demographics.ethnicity = {}", join(&demo.ethnicity)));
            lines.push(format!("dataset.demographics.gender = {}", join(&demo.gender)));
        }
        lines.extend([
            format!("model.patch_size = {}", m.patch_size),
            format!("model.hidden_dim = {}", m.hidden_dim),
            format!("model.num_layers = {}", m.num_layers),
            format!("model.num_heads = {}", m.num_heads),
            format!("model.mlp_ratio = {}", m.mlp_ratio),
            format!("model.dropout = {}", m.dropout_p),
            format!("train.epochs = {}", t.epochs),
            format!("train.freeze_epochs = {}", t.freeze_epochs),
            format!("train.lr_backbone = {}", t.lr_backbone),
            format!("train.lr_heads = {}", t.lr_heads),
            format!("train.floor_fraction = {}", t.floor_fraction),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.weight_decay = {}", t.weight_decay),
            format!("train.beta1 = {}", t.beta1),
            format!("train.beta2 = {}", t.beta2),
            format!("train.val_fraction = {}", t.val_fraction),
            format!("loss.pspi = {}", l.pspi),
            format!("loss.au = {}", l.au),
            format!("loss.pspi_distill = {}", l.pspi_distill),
            format!("loss.au_distill = {}", l.au_distill),
            format!("loss.feature_distill = {}", l.feature_distill),
            format!("loss.temperature = {}", l.temperature),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON form, output root excluded. Formatting
    /// and key order in the source file do not affect it.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    /// Model config for a role's input channels.
    pub fn model_for(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            image_size: self.dataset.resolution,
            ..self.model.clone()
        }
    }
}

fn demographics(slot: &mut Option<DemographicConfig>) -> &mut DemographicConfig {
    slot.get_or_insert_with(|| DemographicConfig {
        age: [0; 2],
        ethnicity: [0; 6],
        gender: [0; 2],
    })
}
