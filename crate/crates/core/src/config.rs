//! Run configuration as flat `key=value` text.
//!
//! Keys are the field names of [`ModelConfig`], [`TrainConfig`] and
//! [`DataConfig`]. Blank lines and lines starting with `#` are skipped.
//! Unknown keys are errors.

use std::fmt;
use std::str::FromStr;

use crate::data::{PolicyConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, ReconRegion};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
    Linprobe,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Linprobe => "linprobe",
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "linprobe" => Ok(Stage::Linprobe),
            _ => Err(format!("unknown stage `{s}`")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReconRegion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ReconRegion::parse(s)
            .ok_or_else(|| format!("unknown region `{s}`, expected visible, masked or all"))
    }
}

impl fmt::Display for ReconRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `min_lr = lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Stops after this many optimizer steps when nonzero. The schedule
    /// is laid out over the capped length.
    pub max_steps: usize,
    /// Effective batch per optimizer step.
    pub batch_size: usize,
    pub accum_steps: usize,
    pub mask_ratio: f64,
    pub tau: f64,
    pub alpha: f64,
    pub momentum_m: f64,
    pub bank_size: usize,
    pub recon_region: ReconRegion,
    /// Checkpoint every this many optimizer steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Fraction of a labelled set held out for evaluation when no separate
    /// test split exists.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = TrainConfig {
            stage,
            lr: 1.5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            min_lr_ratio: 1e-3,
            epochs: 2000,
            warmup_epochs: 50,
            max_steps: 0,
            batch_size: 2048,
            accum_steps: 1,
            mask_ratio: 0.75,
            tau: 0.2,
            alpha: 0.1,
            momentum_m: 0.99,
            bank_size: 65_536,
            recon_region: ReconRegion::Visible,
            checkpoint_every: 0,
            eval_fraction: 0.2,
            seed: 0,
        };
        match stage {
            Stage::Pretrain => base,
            Stage::Finetune => TrainConfig {
                lr: 1.5e-3,
                epochs: 200,
                warmup_epochs: 5,
                ..base
            },
            Stage::Linprobe => TrainConfig {
                lr: 0.1,
                weight_decay: 0.0,
                epochs: 200,
                warmup_epochs: 5,
                ..base
            },
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.accum_steps.max(1)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            tau: self.tau,
            alpha: self.alpha,
            region: self.recon_region,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.batch_size == 0 || self.accum_steps == 0 {
            return bad("batch_size", "batch_size and accum_steps must be positive");
        }
        if !self.batch_size.is_multiple_of(self.accum_steps) {
            return bad(
                "accum_steps",
                &format!(
                    "{} does not divide batch_size {}",
                    self.accum_steps, self.batch_size
                ),
            );
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", "must lie in [0, 1)");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum_m) {
            return bad("momentum_m", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return bad("lr", "lr and weight_decay must be non-negative");
        }
        if self.stage == Stage::Pretrain && self.bank_size == 0 {
            return bad("bank_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Dataset source parameters and augmentation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub synth_n: usize,
    pub synth_noise: f64,
    pub synth_period: f64,
    pub synth_phase_span: f64,
    pub synth_contrast: f64,
    pub synth_seed: u64,
    pub aug_crop_prob: f64,
    pub aug_crop_min_scale: f64,
    pub aug_flip_prob: f64,
    pub aug_jitter_prob: f64,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
    pub aug_saturation: f64,
    pub aug_hue: f64,
    pub aug_gray_prob: f64,
    pub aug_blur_prob: f64,
    pub aug_solarize_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let p = PolicyConfig::default();
        DataConfig {
            synth_n: s.n,
            synth_noise: s.noise,
            synth_period: s.period,
            synth_phase_span: s.phase_span,
            synth_contrast: s.contrast,
            synth_seed: s.seed,
            aug_crop_prob: p.crop_prob,
            aug_crop_min_scale: p.crop_min_scale,
            aug_flip_prob: p.flip_prob,
            aug_jitter_prob: p.jitter_prob,
            aug_brightness: p.brightness,
            aug_contrast: p.contrast,
            aug_saturation: p.saturation,
            aug_hue: p.hue,
            aug_gray_prob: p.gray_prob,
            aug_blur_prob: p.blur_prob,
            aug_solarize_prob: p.solarize_prob,
        }
    }
}

impl DataConfig {
    pub fn policy(&self, size: usize) -> PolicyConfig {
        PolicyConfig {
            size,
            crop_prob: self.aug_crop_prob,
            crop_min_scale: self.aug_crop_min_scale,
            flip_prob: self.aug_flip_prob,
            jitter_prob: self.aug_jitter_prob,
            brightness: self.aug_brightness,
            contrast: self.aug_contrast,
            saturation: self.aug_saturation,
            hue: self.aug_hue,
            gray_prob: self.aug_gray_prob,
            blur_prob: self.aug_blur_prob,
            solarize_prob: self.aug_solarize_prob,
        }
    }

    pub fn synth(&self, model: &ModelConfig) -> SynthConfig {
        SynthConfig {
            n: self.synth_n,
            size: model.image_size,
            channels: model.channels,
            noise: self.synth_noise,
            period: self.synth_period,
            phase_span: self.synth_phase_span,
            contrast: self.synth_contrast,
            seed: self.synth_seed,
        }
    }
}

/// Keys of [`ModelConfig`].
pub const MODEL_KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "enc_depth",
    "enc_heads",
    "enc_dim",
    "dec_dim",
    "dec_heads",
    "proj_dim",
    "num_classes",
    "freeze_patch_embed",
];

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

macro_rules! fields {
    ($( $group:ident . $field:ident ),* $(,)?) => {
        /// Every accepted key, in emission order.
        pub const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($field) => self.$group.$field = parse(stringify!($field), value)?,)*
                    other => return Err(Error::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            /// Text form of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$group.$field.to_string()),)*
                    _ => None,
                }
            }
        }
    };
}

fields!(
    train.stage,
    model.image_size,
    model.patch_size,
    model.channels,
    model.enc_depth,
    model.enc_heads,
    model.enc_dim,
    model.dec_dim,
    model.dec_heads,
    model.proj_dim,
    model.num_classes,
    model.freeze_patch_embed,
    train.lr,
    train.weight_decay,
    train.beta1,
    train.beta2,
    train.adam_eps,
    train.min_lr_ratio,
    train.epochs,
    train.warmup_epochs,
    train.max_steps,
    train.batch_size,
    train.accum_steps,
    train.mask_ratio,
    train.tau,
    train.alpha,
    train.momentum_m,
    train.bank_size,
    train.recon_region,
    train.checkpoint_every,
    train.eval_fraction,
    train.seed,
    data.synth_n,
    data.synth_noise,
    data.synth_period,
    data.synth_phase_span,
    data.synth_contrast,
    data.synth_seed,
    data.aug_crop_prob,
    data.aug_crop_min_scale,
    data.aug_flip_prob,
    data.aug_jitter_prob,
    data.aug_brightness,
    data.aug_contrast,
    data.aug_saturation,
    data.aug_hue,
    data.aug_gray_prob,
    data.aug_blur_prob,
    data.aug_solarize_prob,
);

impl RunConfig {
    pub fn for_stage(stage: Stage) -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::for_stage(stage),
            data: DataConfig::default(),
        }
    }

    /// Applies `key=value` lines on top of `self`. Errors name the line and
    /// the key.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            self.set(key, value).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    i + 1,
                    e.to_string().trim_start_matches("invalid configuration: ")
                ))
            })?;
        }
        Ok(())
    }

    /// Stage defaults from the text's `stage` key (or `fallback`), then every
    /// key of the text.
    pub fn parse(text: &str, fallback: Stage) -> Result<Self> {
        let mut stage = fallback;
        for line in text.lines() {
            if let Some((k, v)) = line.trim().split_once('=') {
                if k.trim() == "stage" {
                    stage = parse("stage", v.trim())?;
                }
            }
        }
        let mut cfg = RunConfig::for_stage(stage);
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
