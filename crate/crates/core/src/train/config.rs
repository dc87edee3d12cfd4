use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::image::ImageEncoderConfig;
use crate::text::{TextEncoderConfig, TextEncoderKind};
use crate::ActivationKind;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Mae,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected mse or mae)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        })
    }
}

/// Scale the model regresses on. `minmax` maps ratings [1, 5] onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetScale {
    Raw,
    Minmax,
}

impl TargetScale {
    pub fn forward(self, rating: f64) -> f64 {
        match self {
            TargetScale::Raw => rating,
            TargetScale::Minmax => (rating - crate::data::MIN_RATING) / (crate::data::MAX_RATING - crate::data::MIN_RATING),
        }
    }

    pub fn inverse(self, y: f64) -> f64 {
        match self {
            TargetScale::Raw => y,
            TargetScale::Minmax => y * (crate::data::MAX_RATING - crate::data::MIN_RATING) + crate::data::MIN_RATING,
        }
    }
}

impl FromStr for TargetScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(TargetScale::Raw),
            "minmax" => Ok(TargetScale::Minmax),
            other => Err(Error::Config(format!("unknown target scale `{other}` (expected raw or minmax)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub fusion: FusionConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub target_scale: TargetScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 224 px, width 512, lr 5e-5, clip 1.0, 20 epochs.
    pub fn full() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            fusion: FusionConfig::default(),
            learning_rate: 5e-5,
            epochs: 20,
            batch_size: 16,
            grad_clip: 1.0,
            seed: 0,
            loss: LossKind::Mse,
            target_scale: TargetScale::Raw,
        }
    }

    /// 64 px, width 128; sized to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            image: ImageEncoderConfig::desk(),
            text: TextEncoderConfig::desk(),
            fusion: FusionConfig {
                dropout: 0.0,
                ..FusionConfig::desk()
            },
            learning_rate: 5e-5,
            epochs: 200,
            batch_size: 32,
            grad_clip: 1.0,
            seed: 0,
            loss: LossKind::Mse,
            target_scale: TargetScale::Raw,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn with_activation(mut self, a: ActivationKind) -> Self {
        self.fusion.activation = a;
        self
    }

    pub fn with_text_kind(mut self, k: TextEncoderKind) -> Self {
        self.text.kind = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.fusion.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad clip must be positive, got {}", self.grad_clip)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.image.embed_dim != self.fusion.embed_dim || self.text.output_dim != self.fusion.embed_dim {
            return Err(Error::Config(format!(
                "embedding widths disagree: image {}, text {}, fusion {}",
                self.image.embed_dim, self.text.output_dim, self.fusion.embed_dim
            )));
        }
        Ok(())
    }
}
