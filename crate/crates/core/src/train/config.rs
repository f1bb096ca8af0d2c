//! Run configuration and its text format.
//!
//! The format is line based: `key = value`, `# comment`, and `[section]`
//! headers that prefix the following keys with `section.`. Keys outside any
//! section are top level. Lists are comma separated. Every key has a
//! default, and the resolved snapshot lists all of them, so a snapshot
//! alone reproduces a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::AugmentFlags;
use crate::disout::{DistortionConfig, GradMode, MaskKind};
use crate::error::{Error, Result};
use crate::nn::presets::{AttachAt, Preset};
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regularizer {
    None,
    Dropout,
    DropBlock,
    DisoutElement,
    DisoutBlock,
}

impl Regularizer {
    pub const ALL: [Regularizer; 5] = [
        Regularizer::None,
        Regularizer::Dropout,
        Regularizer::DropBlock,
        Regularizer::DisoutElement,
        Regularizer::DisoutBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Dropout => "dropout",
            Regularizer::DropBlock => "dropblock",
            Regularizer::DisoutElement => "disout-element",
            Regularizer::DisoutBlock => "disout-block",
        }
    }

    pub fn attach_at(self) -> AttachAt {
        match self {
            Regularizer::None => AttachAt::None,
            Regularizer::Dropout | Regularizer::DisoutElement => AttachAt::Dense,
            Regularizer::DropBlock | Regularizer::DisoutBlock => AttachAt::Conv,
        }
    }

    pub fn mask_kind(self) -> MaskKind {
        match self {
            Regularizer::DropBlock | Regularizer::DisoutBlock => MaskKind::Block,
            _ => MaskKind::Element,
        }
    }

    /// Whether the distortion is optimized rather than fixed to the features.
    pub fn learned(self) -> bool {
        matches!(self, Regularizer::DisoutElement | Regularizer::DisoutBlock)
    }
}

impl FromStr for Regularizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown regularizer `{s}` (none, dropout, dropblock, disout-element, disout-block)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Mnist,
    Cifar10,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Blobs => "blobs",
            DataSource::Mnist => "mnist",
            DataSource::Cifar10 => "cifar10",
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "blobs" => Ok(DataSource::Blobs),
            "mnist" => Ok(DataSource::Mnist),
            "cifar10" => Ok(DataSource::Cifar10),
            _ => Err(format!("unknown data source `{s}` (blobs, mnist, cifar10)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the IDX or CIFAR-10 binary files.
    pub dir: PathBuf,
    /// Use only the first `n` training samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub blobs_train: usize,
    pub blobs_test: usize,
    pub blobs_classes: usize,
    pub blobs_dims: usize,
    pub blobs_separation: f64,
    pub seed: u64,
    /// Per-channel normalization; empty leaves pixels in `[0, 1]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub augment: AugmentFlags,
    pub preset: Preset,
    pub bias: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Extra metrics row every `n` iterations; 0 logs epoch ends only.
    pub log_every: usize,
    /// Clean (distortion-free) accuracy on the training set at each epoch end.
    pub eval_train: bool,
    /// Checkpoint every `n` epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub regularizer: Regularizer,
    pub disout: DistortionConfig,
    pub grad_mode: GradMode,
    pub compare_regularizers: Vec<Regularizer>,
    pub compare_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataConfig {
                source: DataSource::Blobs,
                dir: PathBuf::from("data/mnist"),
                train_limit: 0,
                test_limit: 0,
                blobs_train: 600,
                blobs_test: 300,
                blobs_classes: 3,
                blobs_dims: 20,
                blobs_separation: 4.0,
                seed: 0,
                mean: Vec::new(),
                std: Vec::new(),
            },
            augment: AugmentFlags::default(),
            preset: Preset::BlobsMlp,
            bias: true,
            epochs: 30,
            batch_size: 64,
            eval_batch_size: 500,
            lr: 0.01,
            lr_decay_epochs: vec![9, 18, 24],
            lr_decay_factor: 5.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            precision: Precision::F32,
            log_every: 0,
            eval_train: true,
            checkpoint_every: 0,
            regularizer: Regularizer::None,
            disout: DistortionConfig::default(),
            grad_mode: GradMode::Exact,
            compare_regularizers: vec![Regularizer::None, Regularizer::Dropout, Regularizer::DisoutElement],
            compare_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

/// Every key, in snapshot order.
pub const KEYS: &[&str] = &[
    "regularizer",
    "data.source",
    "data.dir",
    "data.train_limit",
    "data.test_limit",
    "data.blobs_train",
    "data.blobs_test",
    "data.blobs_classes",
    "data.blobs_dims",
    "data.blobs_separation",
    "data.seed",
    "data.mean",
    "data.std",
    "augment.flip",
    "augment.crop_pad",
    "augment.rotate_deg",
    "model.preset",
    "model.bias",
    "train.epochs",
    "train.batch_size",
    "train.eval_batch_size",
    "train.lr",
    "train.lr_decay_epochs",
    "train.lr_decay_factor",
    "train.momentum",
    "train.weight_decay",
    "train.seed",
    "train.precision",
    "train.log_every",
    "train.eval_train",
    "train.checkpoint_every",
    "disout.p_target",
    "disout.gamma",
    "disout.lambda",
    "disout.block_size",
    "disout.steps_per_batch",
    "disout.ramp_fraction",
    "disout.grad_mode",
    "compare.regularizers",
    "compare.seeds",
];

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let d = &mut self.data;
        match key {
            "regularizer" => self.regularizer = parse(v)?,
            "data.source" => d.source = parse(v)?,
            "data.dir" => d.dir = PathBuf::from(v),
            "data.train_limit" => d.train_limit = parse(v)?,
            "data.test_limit" => d.test_limit = parse(v)?,
            "data.blobs_train" => d.blobs_train = parse(v)?,
            "data.blobs_test" => d.blobs_test = parse(v)?,
            "data.blobs_classes" => d.blobs_classes = parse(v)?,
            "data.blobs_dims" => d.blobs_dims = parse(v)?,
            "data.blobs_separation" => d.blobs_separation = parse(v)?,
            "data.seed" => d.seed = parse(v)?,
            "data.mean" => d.mean = parse_list(v)?,
            "data.std" => d.std = parse_list(v)?,
            "augment.flip" => self.augment.flip = parse_bool(v)?,
            "augment.crop_pad" => self.augment.crop_pad = parse(v)?,
            "augment.rotate_deg" => self.augment.rotate_deg = parse(v)?,
            "model.preset" => self.preset = parse(v)?,
            "model.bias" => self.bias = parse_bool(v)?,
            "train.epochs" => self.epochs = parse(v)?,
            "train.batch_size" => self.batch_size = parse(v)?,
            "train.eval_batch_size" => self.eval_batch_size = parse(v)?,
            "train.lr" => self.lr = parse(v)?,
            "train.lr_decay_epochs" => self.lr_decay_epochs = parse_list(v)?,
            "train.lr_decay_factor" => self.lr_decay_factor = parse(v)?,
            "train.momentum" => self.momentum = parse(v)?,
            "train.weight_decay" => self.weight_decay = parse(v)?,
            "train.seed" => self.seed = parse(v)?,
            "train.precision" => self.precision = parse(v)?,
            "train.log_every" => self.log_every = parse(v)?,
            "train.eval_train" => self.eval_train = parse_bool(v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(v)?,
            "disout.p_target" => self.disout.p_target = parse(v)?,
            "disout.gamma" => self.disout.gamma = parse(v)?,
            "disout.lambda" => self.disout.lambda = parse(v)?,
            "disout.block_size" => self.disout.block_size = parse(v)?,
            "disout.steps_per_batch" => self.disout.steps_per_batch = parse(v)?,
            "disout.ramp_fraction" => self.disout.ramp_fraction = parse(v)?,
            "disout.grad_mode" => self.grad_mode = parse(v)?,
            "compare.regularizers" => self.compare_regularizers = parse_list(v)?,
            "compare.seeds" => self.compare_seeds = parse_list(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form of one key, as written to snapshots.
    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        Some(match key {
            "regularizer" => self.regularizer.name().to_string(),
            "data.source" => d.source.name().to_string(),
            "data.dir" => d.dir.display().to_string(),
            "data.train_limit" => d.train_limit.to_string(),
            "data.test_limit" => d.test_limit.to_string(),
            "data.blobs_train" => d.blobs_train.to_string(),
            "data.blobs_test" => d.blobs_test.to_string(),
            "data.blobs_classes" => d.blobs_classes.to_string(),
            "data.blobs_dims" => d.blobs_dims.to_string(),
            "data.blobs_separation" => d.blobs_separation.to_string(),
            "data.seed" => d.seed.to_string(),
            "data.mean" => join(&d.mean),
            "data.std" => join(&d.std),
            "augment.flip" => self.augment.flip.to_string(),
            "augment.crop_pad" => self.augment.crop_pad.to_string(),
            "augment.rotate_deg" => self.augment.rotate_deg.to_string(),
            "model.preset" => self.preset.name().to_string(),
            "model.bias" => self.bias.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.eval_batch_size" => self.eval_batch_size.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.lr_decay_epochs" => join(&self.lr_decay_epochs),
            "train.lr_decay_factor" => self.lr_decay_factor.to_string(),
            "train.momentum" => self.momentum.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.precision" => self.precision.name().to_string(),
            "train.log_every" => self.log_every.to_string(),
            "train.eval_train" => self.eval_train.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "disout.p_target" => self.disout.p_target.to_string(),
            "disout.gamma" => self.disout.gamma.to_string(),
            "disout.lambda" => self.disout.lambda.to_string(),
            "disout.block_size" => self.disout.block_size.to_string(),
            "disout.steps_per_batch" => self.disout.steps_per_batch.to_string(),
            "disout.ramp_fraction" => self.disout.ramp_fraction.to_string(),
            "disout.grad_mode" => self.grad_mode.name().to_string(),
            "compare.regularizers" => join(&self.compare_regularizers.iter().map(|r| r.name()).collect::<Vec<_>>()),
            "compare.seeds" => join(&self.compare_seeds),
            _ => return None,
        })
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{line_no}: expected `key = value`, got `{line}`")));
            };
            let key = key.trim();
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            self.set(&full, value)
                .map_err(|e| Error::Config(format!("{origin}:{line_no}: key `{full}`: {e}")))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        let key = key.trim();
        self.set(key, value)
            .map_err(|e| Error::Config(format!("override `{pair}`: key `{key}`: {e}")))
    }

    /// Defaults, then the file at `path` (if any), then `overrides`, validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration with every key, grouped by section.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                let _ = write!(out, "\n[{sec}]\n");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Distortion parameters with the mask kind implied by the regularizer.
    pub fn distortion(&self) -> DistortionConfig {
        DistortionConfig {
            mask_kind: self.regularizer.mask_kind(),
            ..self.disout.clone()
        }
    }

    /// Checks that do not depend on the data or network shapes.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("train.batch_size and train.eval_batch_size must be at least 1".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("train.lr_decay_epochs must be strictly increasing, got {:?}", self.lr_decay_epochs));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return fail("train.lr_decay_factor must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("train.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("train.momentum must be in [0, 1) and train.weight_decay non-negative".into());
        }
        if self.data.blobs_classes < 2 {
            return fail("data.blobs_classes must be at least 2".into());
        }
        if self.data.mean.len() != self.data.std.len() {
            return fail("data.mean and data.std must have the same length".into());
        }
        if !(self.augment.rotate_deg >= 0.0 && self.augment.rotate_deg <= 180.0) {
            return fail("augment.rotate_deg must be in [0, 180]".into());
        }
        if self.regularizer.attach_at() == AttachAt::Conv && !self.preset.is_conv() {
            return fail(format!(
                "regularizer {} needs conv feature maps; preset {} has none",
                self.regularizer.name(),
                self.preset
            ));
        }
        if self.compare_seeds.is_empty() || self.compare_regularizers.is_empty() {
            return fail("compare.regularizers and compare.seeds must not be empty".into());
        }
        self.distortion().validate(&[])
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.lr_decay_factor.powi(decays as i32)
    }
}
