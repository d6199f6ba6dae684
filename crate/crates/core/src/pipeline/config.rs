//! Run configuration. One flat TOML file drives every stage; unknown keys
//! are rejected so typos fail loudly instead of silently using a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, PixelNorm};
use crate::mim::MIMConfig;
use crate::perceptual::{FeatureNetConfig, WeightsSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Tokenizer,
    FeatureNet,
    Mim,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Auto,
    ImageDirectory,
    PackedBinary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

fn d_dataset() -> String { String::new() }
fn d_format() -> DatasetFormat { DatasetFormat::Auto }
fn d_out_dir() -> String { "runs/out".into() }
fn d_seed() -> u64 { 0 }
fn d_epochs() -> usize { 20 }
fn d_batch() -> usize { 128 }
fn d_input() -> usize { 32 }
fn d_stages() -> usize { 2 }
fn d_basec() -> usize { 64 }
fn d_res() -> usize { 2 }
fn d_latent() -> usize { 64 }
fn d_attn() -> bool { true }
fn d_groups() -> usize { 8 }
fn d_vocab() -> usize { 512 }
fn d_cb_decay() -> f32 { 0.99 }
fn d_beta() -> f32 { 0.25 }
fn d_lambda() -> f32 { 1.0 }
fn d_advw() -> f32 { 0.0 }
fn d_adv_start() -> f32 { 0.75 }
fn d_pixel() -> PixelNorm { PixelNorm::L1 }
fn d_disc_base() -> usize { 32 }
fn d_feat_base() -> usize { 16 }
fn d_feat_embed() -> usize { 64 }
fn d_feat_taps() -> Vec<usize> { vec![2, 4, 6, 8] }
fn d_feat_src() -> WeightsSource { WeightsSource::SelfSupervised }
fn d_feat_steps() -> usize { 600 }
fn d_feat_lr() -> f32 { 1e-3 }
fn d_feat_temp() -> f32 { 0.2 }
fn d_patch() -> usize { 4 }
fn d_depth() -> usize { 6 }
fn d_width() -> usize { 256 }
fn d_heads() -> usize { 4 }
fn d_mask() -> f32 { 0.4 }
fn d_sd() -> f32 { 0.1 }
fn d_opt() -> String { "adam".into() }
fn d_lr() -> f32 { 5e-5 }
fn d_beta1() -> f32 { 0.5 }
fn d_beta2() -> f32 { 0.95 }
fn d_wd() -> f32 { 0.0 }
fn d_warmup() -> usize { 500 }
fn d_sched() -> LrSchedule { LrSchedule::Cosine }
fn d_log_every() -> usize { 50 }
fn d_ckpt_every() -> usize { 0 }

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    #[serde(default = "d_dataset")]
    pub dataset: String,
    #[serde(default = "d_format")]
    pub dataset_format: DatasetFormat,
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,

    #[serde(default = "d_input")]
    pub input_size: usize,
    #[serde(default = "d_stages")]
    pub downsample_stages: usize,
    #[serde(default = "d_basec")]
    pub base_channels: usize,
    #[serde(default = "d_res")]
    pub residual_blocks_per_resolution: usize,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_attn")]
    pub attention_at_bottleneck: bool,
    #[serde(default = "d_groups")]
    pub norm_groups: usize,
    #[serde(default = "d_vocab")]
    pub codebook_size: usize,
    #[serde(default = "d_cb_decay")]
    pub codebook_decay: f32,

    #[serde(default = "d_beta")]
    pub beta: f32,
    #[serde(default = "d_lambda")]
    pub lambda: f32,
    #[serde(default = "d_advw")]
    pub adv_weight: f32,
    #[serde(default = "d_adv_start")]
    pub adv_start_frac: f32,
    #[serde(default = "d_pixel")]
    pub pixel_norm: PixelNorm,
    #[serde(default = "d_disc_base")]
    pub disc_base_channels: usize,

    #[serde(default = "d_feat_base")]
    pub feature_base_channels: usize,
    #[serde(default = "d_feat_embed")]
    pub feature_embed_dim: usize,
    #[serde(default = "d_feat_taps")]
    pub feature_taps: Vec<usize>,
    #[serde(default = "d_feat_src")]
    pub feature_weights: WeightsSource,
    #[serde(default = "d_feat_steps")]
    pub feature_steps: usize,
    #[serde(default = "d_feat_lr")]
    pub feature_lr: f32,
    #[serde(default = "d_feat_temp")]
    pub feature_temperature: f32,

    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_depth")]
    pub mim_depth: usize,
    #[serde(default = "d_width")]
    pub mim_width: usize,
    #[serde(default = "d_heads")]
    pub mim_heads: usize,
    #[serde(default = "d_mask")]
    pub mask_ratio: f32,
    #[serde(default = "d_sd")]
    pub stochastic_depth_rate: f32,

    #[serde(default = "d_opt")]
    pub optimizer: String,
    #[serde(default = "d_lr")]
    pub lr: f32,
    #[serde(default = "d_beta1")]
    pub beta1: f32,
    #[serde(default = "d_beta2")]
    pub beta2: f32,
    #[serde(default = "d_wd")]
    pub weight_decay: f32,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_sched")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn with_stage(stage: Stage) -> Self {
        let text = format!("stage = \"{}\"", match stage {
            Stage::Tokenizer => "tokenizer",
            Stage::FeatureNet => "feature-net",
            Stage::Mim => "mim",
            Stage::Eval => "eval",
        });
        Self::from_toml(&text).expect("defaults are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.apply_env_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Only the output directory and the worker thread count may come from
    /// the environment; everything else must live in the config file.
    fn apply_env_overrides(&mut self) {
        if let Ok(dir) = std::env::var("PECO_OUT") {
            if !dir.is_empty() {
                self.out_dir = dir;
            }
        }
        if let Ok(n) = std::env::var("PECO_THREADS") {
            if let Ok(n) = n.parse::<usize>() {
                crate::numerics::kernels::set_worker_threads(n);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec_config().validate()?;
        self.loss_config().validate()?;
        self.mim_config().validate()?;
        self.feature_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.codebook_size == 0 || self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!(
                "codebook_size {} outside 1..=65536",
                self.codebook_size
            )));
        }
        if !(0.0..1.0).contains(&self.codebook_decay) {
            return Err(Error::Config(format!("codebook_decay {} outside [0,1)", self.codebook_decay)));
        }
        if !(0.0..=1.0).contains(&self.adv_start_frac) {
            return Err(Error::Config(format!(
                "adv_start_frac {} outside [0,1]",
                self.adv_start_frac
            )));
        }
        if self.optimizer != "adam" && self.optimizer != "adamw" {
            return Err(Error::Config(format!("unknown optimizer {:?}", self.optimizer)));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            input_size: self.input_size,
            downsample_stages: self.downsample_stages,
            base_channels: self.base_channels,
            residual_blocks_per_resolution: self.residual_blocks_per_resolution,
            latent_dim: self.latent_dim,
            attention_at_bottleneck: self.attention_at_bottleneck,
            norm_groups: self.norm_groups,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            lambda: self.lambda,
            adv_weight: self.adv_weight,
            pixel_norm: self.pixel_norm,
        }
    }

    pub fn mim_config(&self) -> MIMConfig {
        MIMConfig {
            input_size: self.input_size,
            patch_size: self.patch_size,
            depth: self.mim_depth,
            width: self.mim_width,
            heads: self.mim_heads,
            vocab: self.codebook_size,
            mask_ratio: self.mask_ratio,
            stochastic_depth_rate: self.stochastic_depth_rate,
        }
    }

    pub fn feature_config(&self) -> FeatureNetConfig {
        FeatureNetConfig {
            input_size: self.input_size,
            base_channels: self.feature_base_channels,
            tap_layers: self.feature_taps.clone(),
            embed_dim: self.feature_embed_dim,
            weights_source: self.feature_weights,
        }
    }

    /// The base rate follows the reference batch of 128; smaller batches
    /// train with proportionally smaller steps.
    pub fn scaled_lr(&self) -> f32 {
        self.lr * self.batch_size as f32 / 128.0
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn as_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.apply_env_overrides();
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml("stage = \"tokenizer\"").expect("parse");
        assert_eq!(cfg.stage, Stage::Tokenizer);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.warmup_steps, 500);
        assert_eq!((cfg.beta1, cfg.beta2), (0.5, 0.95));
        assert_eq!(cfg.lr, 5e-5);
        assert_eq!(cfg.input_size, 32);
        assert_eq!(cfg.codebook_size, 512);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml("stage = \"mim\"\nlearning_rate = 0.1")
            .expect_err("misspelled key must fail");
        let msg = format!("{err}");
        assert!(msg.contains("learning_rate"), "diagnostic should name the key: {msg}");
    }

    #[test]
    fn round_trips_through_toml_and_json() {
        let mut cfg = RunConfig::with_stage(Stage::Mim);
        cfg.mask_ratio = 0.6;
        cfg.seed = 9;
        let back = RunConfig::from_toml(&cfg.to_toml()).expect("parse");
        assert_eq!(back.mask_ratio, 0.6);
        assert_eq!(back.seed, 9);
        let back2 = RunConfig::from_json(&cfg.as_json()).expect("parse");
        assert_eq!(back2.mask_ratio, 0.6);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("stage = \"tokenizer\"\nbatch_size = 0").is_err());
        assert!(RunConfig::from_toml("stage = \"tokenizer\"\nlambda = -1.0").is_err());
        assert!(RunConfig::from_toml("stage = \"tokenizer\"\noptimizer = \"sgd\"").is_err());
        assert!(RunConfig::from_toml("stage = \"nope\"").is_err());
    }

    #[test]
    fn lr_scales_with_batch() {
        let mut cfg = RunConfig::with_stage(Stage::Tokenizer);
        assert!((cfg.scaled_lr() - 5e-5).abs() < 1e-12);
        cfg.batch_size = 32;
        assert!((cfg.scaled_lr() - 1.25e-5).abs() < 1e-12);
    }
}
