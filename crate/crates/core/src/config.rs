//! Run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::SynthConfig;
use crate::tokenizer::DEFAULT_OMEGA;

/// Network shape. Patch size and class count come from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the map class embedding.
    pub class_embed: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub dec_layers: usize,
    /// Width of the shared contrastive space.
    pub proj_dim: usize,
    pub omega: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            class_embed: 16,
            dec_dim: 32,
            dec_heads: 2,
            dec_layers: 2,
            proj_dim: 32,
            omega: DEFAULT_OMEGA,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::config(format!("model.dim {} must be a positive multiple of 4", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("model.heads {} must divide model.dim {}", self.heads, self.dim)));
        }
        if self.dec_heads == 0 || self.dec_dim == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return Err(Error::config(format!("model.dec_heads {} must divide model.dec_dim {}", self.dec_heads, self.dec_dim)));
        }
        if self.mlp_ratio == 0 || self.class_embed == 0 || self.proj_dim == 0 {
            return Err(Error::config("model.mlp_ratio, model.class_embed and model.proj_dim must be positive"));
        }
        if !(self.omega > 0.0) {
            return Err(Error::config("model.omega must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Visible modality tokens per sample; defaults to a quarter of all
    /// modality and fusion tokens.
    pub budget: Option<usize>,
    /// Weight of the contrastive terms; 0 gives generative-only pretraining.
    pub lambda2: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            budget: None,
            lambda2: 1.0,
            tau: 0.07,
            epochs: 50,
            batch: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 40.0 / 1600.0,
            checkpoint_every: 10,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("pretrain.alpha must be positive, got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("pretrain.tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::config(format!("pretrain.lambda2 must be non-negative, got {}", self.lambda2)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("pretrain.epochs and pretrain.batch must be positive"));
        }
        if self.lambda2 > 0.0 && self.batch < 2 {
            return Err(Error::config("contrastive pretraining needs pretrain.batch >= 2"));
        }
        check_optimizer("pretrain", self.lr, self.weight_decay)?;
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("pretrain.warmup_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Scratch,
    FullFinetune,
    PartialFinetune,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Scratch => "scratch",
            TrainMode::FullFinetune => "full-finetune",
            TrainMode::PartialFinetune => "partial-finetune",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != TrainMode::Scratch
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TrainMode::Scratch),
            "full-finetune" | "full" => Ok(TrainMode::FullFinetune),
            "partial-finetune" | "partial" => Ok(TrainMode::PartialFinetune),
            _ => Err(Error::config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub mode: TrainMode,
    /// Draw a random non-empty modality subset per step; off trains on the full set.
    pub random_combo: bool,
    pub no_lstm: bool,
    pub no_mask: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_mult: f64,
    /// Fractions of training at which the learning rate drops tenfold.
    pub milestones: Vec<f64>,
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Pretrained checkpoint directory for the finetune modes.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Scratch,
            random_combo: true,
            no_lstm: false,
            no_mask: false,
            epochs: 50,
            batch: 10,
            lr: 1e-3,
            weight_decay: 0.05,
            backbone_lr_mult: 0.1,
            milestones: vec![0.9, 0.95],
            ce_weight: 1.0,
            dice_weight: 1.0,
            checkpoint: None,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("downstream.epochs and downstream.batch must be positive"));
        }
        check_optimizer("downstream", self.lr, self.weight_decay)?;
        if !(self.backbone_lr_mult >= 0.0) {
            return Err(Error::config("downstream.backbone_lr_mult must be non-negative"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("downstream.milestones must lie in [0, 1]"));
        }
        if !(self.ce_weight >= 0.0 && self.dice_weight >= 0.0) || self.ce_weight + self.dice_weight == 0.0 {
            return Err(Error::config("downstream loss weights must be non-negative and not both zero"));
        }
        Ok(())
    }
}

fn check_optimizer(section: &str, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("{section}.lr must be positive, got {lr}")));
    }
    if !(weight_decay >= 0.0) {
        return Err(Error::config(format!("{section}.weight_decay must be non-negative")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; generated there by `synth`.
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
}


impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config(format!("data.classes must be at least 2, got {}", d.classes)));
        }
        if d.patch == 0 || d.size == 0 || !d.size.is_multiple_of(d.patch) {
            return Err(Error::config(format!("data.size {} is not divisible by data.patch {}", d.size, d.patch)));
        }
        if d.ratios.iter().any(|&r| !(r > 0.0)) || (d.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("data.ratios {:?} must be positive and sum to 1", d.ratios)));
        }
        if d.object_count.0 > d.object_count.1 {
            return Err(Error::config("data.object_count must be an ordered (min, max) pair"));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.downstream.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "colour": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"depth": 3}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"downstream": {"mode": "partial-finetune"}}"#).unwrap();
        assert_eq!(c.downstream.mode, TrainMode::PartialFinetune);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut c = RunConfig::default();
        c.pretrain.alpha = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.data.ratios = [0.5, 0.5, 0.5];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.model.heads = 3;
        assert!(c.validate().is_err());
    }
}
