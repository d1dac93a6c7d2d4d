//! Flat run configuration. Layers, lowest first: built-in defaults,
//! `SFR_SEED`, the `--config` JSON file, command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sfr_core::geometry::FrustumConfig;
use sfr_core::loss::{DiceOptions, DiceReduction, LossWeights};
use sfr_core::model::ModelConfig;
use sfr_core::train::TrainConfig;

use crate::UsageError;

pub const SEED_ENV: &str = "SFR_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unified_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub main_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sub_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_reduction: Option<DiceReduction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze_alpha: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

macro_rules! overlay_fields {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            manifest: None,
            out_dir: Some(PathBuf::from("run")),
            checkpoint: None,
            seed: Some(0),
            workers: Some(1),
            distances: Some(vec![1.0, 3.0, 14.0]),
            reference_distance: None,
            unified_size: Some(128),
            in_channels: Some(3),
            width: Some(16),
            main_depth: Some(4),
            sub_depth: Some(2),
            dim: Some(32),
            classes: Some(sfr_core::synth::CLASS_COUNT),
            iterations: Some(500),
            batch_size: Some(1),
            lr: Some(3e-3),
            warmup: Some(100),
            weight_decay: Some(0.01),
            lambda: Some(vec![5.0, 1.0, 1.0]),
            dice_eps: Some(1.0),
            dice_reduction: Some(DiceReduction::Class),
            checkpoint_every: Some(0),
            freeze_alpha: Some(false),
            stride: None,
        }
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        overlay_fields!(self, top;
            manifest, out_dir, checkpoint, seed, workers,
            distances, reference_distance, unified_size, in_channels, width,
            main_depth, sub_depth, dim, classes,
            iterations, batch_size, lr, warmup, weight_decay, lambda, dice_eps,
            dice_reduction, checkpoint_every, freeze_alpha, stride,
        );
        self
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn from_env() -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            cfg.seed = Some(seed);
        }
        Ok(cfg)
    }

    /// defaults < SFR_SEED < file < flags
    pub fn resolve(file: Option<&Path>, flags: RunConfig) -> anyhow::Result<Self> {
        let mut cfg = Self::defaults().overlay(Self::from_env()?);
        if let Some(path) = file {
            cfg = cfg.overlay(Self::from_file(path)?);
        }
        Ok(cfg.overlay(flags))
    }

    fn need<T: Clone>(v: &Option<T>, field: &str) -> anyhow::Result<T> {
        v.clone().ok_or_else(|| UsageError(format!("missing required setting `{field}`")).into())
    }

    pub fn frustum(&self) -> anyhow::Result<FrustumConfig> {
        let distances = Self::need(&self.distances, "distances")?;
        let size = Self::need(&self.unified_size, "unified_size")?;
        let reference = self
            .reference_distance
            .or_else(|| distances.last().copied())
            .unwrap_or(f64::NAN);
        Ok(FrustumConfig::with_reference(distances, reference, (size, size))?)
    }

    pub fn model(&self) -> anyhow::Result<ModelConfig> {
        let size = Self::need(&self.unified_size, "unified_size")?;
        let distances = Self::need(&self.distances, "distances")?;
        let cfg = ModelConfig {
            n_scales: distances.len(),
            in_channels: Self::need(&self.in_channels, "in_channels")?,
            input_size: (size, size),
            width: Self::need(&self.width, "width")?,
            main_depth: Self::need(&self.main_depth, "main_depth")?,
            sub_depth: Self::need(&self.sub_depth, "sub_depth")?,
            dim: Self::need(&self.dim, "dim")?,
            classes: Self::need(&self.classes, "classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> anyhow::Result<LossWeights> {
        let l = Self::need(&self.lambda, "lambda")?;
        if l.len() != 3 {
            bail!(UsageError(format!("lambda needs 3 values (dice, ce_main, ce_aux), got {}", l.len())));
        }
        Ok(LossWeights::new(l[0], l[1], l[2])?)
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let manifest = Self::need(&self.manifest, "manifest")?;
        let mut t = TrainConfig::new(self.frustum()?, self.model()?, manifest);
        t.iterations = Self::need(&self.iterations, "iterations")?;
        t.batch_size = Self::need(&self.batch_size, "batch_size")?;
        t.lr = Self::need(&self.lr, "lr")?;
        t.warmup = Self::need(&self.warmup, "warmup")?;
        t.weight_decay = Self::need(&self.weight_decay, "weight_decay")?;
        t.loss_weights = self.loss_weights()?;
        t.dice = DiceOptions {
            eps: Self::need(&self.dice_eps, "dice_eps")?,
            reduction: Self::need(&self.dice_reduction, "dice_reduction")?,
        };
        t.seed = Self::need(&self.seed, "seed")?;
        t.out_dir = Self::need(&self.out_dir, "out_dir")?;
        t.checkpoint_every = Self::need(&self.checkpoint_every, "checkpoint_every")?;
        t.workers = Self::need(&self.workers, "workers")?;
        t.freeze_alpha = Self::need(&self.freeze_alpha, "freeze_alpha")?;
        t.validate()?;
        Ok(t)
    }
}
