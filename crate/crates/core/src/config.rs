//! Architecture and optimisation settings, named presets, and JSON override merging.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::PartitionLayout;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModVariant {
    /// `D' = D + α·ReLU(D·W_m + b_m)`
    Linear,
    /// `D' = D + α·(ReLU(LN(D·W_1 + b_1))·W_2 + b_2)`, widths d → 2d → d.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioEncoderKind {
    ToyConv,
    FeatureFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// Logits divided by `sqrt(d)` of the full model width.
    Model,
    /// Logits divided by `sqrt(d / heads)`.
    PerHead,
}

/// What the decoder consumes as its own input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// Speaker B's projected audio features.
    AudioB,
    /// Positional encoding only; B's audio is ignored.
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub output_activation: OutputActivation,
    pub mod_variant: ModVariant,
    /// Alignment window `w`; `None` attends to the whole past.
    pub mask_window: Option<usize>,
    pub b: usize,
    pub fps: f64,
    pub sample_rate: u32,
    pub audio_encoder: AudioEncoderKind,
    /// Fixed multiplier applied to raw samples before the first convolution. PCM speech sits near
    /// 0.03 RMS, where GELU is almost linear and frame energy barely reaches the features.
    pub waveform_gain: f64,
    /// Kernel = stride of each audio convolution; the product must equal `sample_rate / fps`.
    pub conv_strides: Vec<usize>,
    /// Output widths of all but the last convolution (which emits `d_enc`).
    pub conv_channels: Vec<usize>,
    pub audio_attn_layers: usize,
    pub attn_scale: AttnScale,
    pub decoder_input: DecoderInput,
    pub layout: PartitionLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 3] = ["full", "toy", "tiny"];

    pub fn full() -> Self {
        Self {
            d: 256,
            d_enc: 1024,
            heads: 4,
            lstm_hidden: 512,
            lstm_layers: 2,
            enc_layers: 3,
            dec_layers: 3,
            ffn_dim: 512,
            dropout: 0.1,
            alpha: 1.0,
            output_activation: OutputActivation::Sigmoid,
            mod_variant: ModVariant::Linear,
            mask_window: None,
            b: 56,
            fps: 25.0,
            sample_rate: 16_000,
            audio_encoder: AudioEncoderKind::ToyConv,
            waveform_gain: 30.0,
            conv_strides: vec![5, 4, 4, 4, 2],
            conv_channels: vec![64, 128, 256, 512],
            audio_attn_layers: 2,
            attn_scale: AttnScale::Model,
            decoder_input: DecoderInput::AudioB,
            layout: PartitionLayout::flame56(),
        }
    }

    /// Desk-scale model used for the synthetic learnability runs.
    pub fn toy() -> Self {
        Self {
            d: 64,
            d_enc: 64,
            lstm_hidden: 32,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            conv_strides: vec![8, 8, 10],
            conv_channels: vec![16, 32],
            audio_attn_layers: 1,
            ..Self::full()
        }
    }

    /// Smallest configuration that still exercises every stage; used by the gradient check.
    pub fn tiny() -> Self {
        Self {
            d: 16,
            d_enc: 8,
            heads: 2,
            lstm_hidden: 8,
            lstm_layers: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            dropout: 0.0,
            sample_rate: 400,
            conv_strides: vec![4, 4],
            conv_channels: vec![4],
            audio_attn_layers: 1,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::validation(
                "preset",
                format!("unknown preset {other:?}; expected one of full, toy, tiny"),
            )),
        }
    }

    /// Audio samples per motion frame.
    pub fn hop(&self) -> usize {
        (self.sample_rate as f64 / self.fps).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn attention_scale(&self) -> f64 {
        match self.attn_scale {
            AttnScale::Model => 1.0 / (self.d as f64).sqrt(),
            AttnScale::PerHead => 1.0 / (self.head_dim() as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_enc", self.d_enc),
            ("heads", self.heads),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("ffn_dim", self.ffn_dim),
            ("b", self.b),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.d % 2 != 0 {
            return Err(Error::validation("d", "must be even"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::validation(
                "heads",
                format!("d = {} is not divisible by {} heads", self.d, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout", "must lie in [0, 1)"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::validation("alpha", "must be finite"));
        }
        if !(self.waveform_gain.is_finite() && self.waveform_gain > 0.0) {
            return Err(Error::validation("waveform_gain", "must be positive and finite"));
        }
        if self.mask_window == Some(0) {
            return Err(Error::validation("mask_window", "must be at least 1"));
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::validation("fps", "fps and sample_rate must be positive"));
        }
        let hop = self.sample_rate as f64 / self.fps;
        if (hop - hop.round()).abs() > 1e-9 {
            return Err(Error::validation(
                "sample_rate",
                "must be an integer multiple of fps",
            ));
        }
        if self.audio_encoder == AudioEncoderKind::ToyConv {
            if self.conv_strides.is_empty() || self.conv_strides.contains(&0) {
                return Err(Error::validation("conv_strides", "need positive strides"));
            }
            let product: usize = self.conv_strides.iter().product();
            if product != self.hop() {
                return Err(Error::validation(
                    "conv_strides",
                    format!(
                        "stride product {product} must equal sample_rate / fps = {}",
                        self.hop()
                    ),
                ));
            }
            if self.conv_channels.len() + 1 != self.conv_strides.len()
                || self.conv_channels.contains(&0)
            {
                return Err(Error::validation(
                    "conv_channels",
                    "need one positive width per convolution except the last",
                ));
            }
        }
        self.layout.validate(self.b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub window_frames: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            window_frames: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// The small model tolerates a tenfold larger step; longer windows give each update whole
    /// speaking turns.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            window_frames: 250,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "toy" | "tiny" => Ok(Self::toy()),
            other => Err(Error::validation(
                "preset",
                format!("unknown preset {other:?}; expected one of full, toy, tiny"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("window_frames", self.window_frames),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.window_frames < 2 {
            return Err(Error::validation("window_frames", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::validation("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Overlays the keys of a JSON object onto `base`. A top-level `"preset"` key, if present,
/// replaces `base` with the named preset first. Unknown keys are rejected.
pub fn merge_overrides<T>(base: &T, overrides: &Value, preset: impl Fn(&str) -> Result<T>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Value::Object(map) = overrides else {
        return Err(Error::validation("config", "expected a JSON object"));
    };
    let mut map = map.clone();
    let start = match map.remove("preset") {
        Some(Value::String(name)) => preset(&name)?,
        Some(_) => return Err(Error::validation("preset", "must be a string")),
        None => serde_json::from_value(serde_json::to_value(base).expect("config serializes"))
            .expect("config round-trips"),
    };
    let mut merged = serde_json::to_value(&start).expect("config serializes");
    let target = merged.as_object_mut().expect("config is an object");
    for (k, v) in map {
        if !target.contains_key(&k) {
            return Err(Error::validation(k, "unknown configuration key"));
        }
        target.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Error::validation("config", e.to_string()))
}

impl ModelConfig {
    pub fn from_json(base: &Self, overrides: &Value) -> Result<Self> {
        let cfg = merge_overrides(base, overrides, Self::preset)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn from_json(base: &Self, overrides: &Value) -> Result<Self> {
        let cfg = merge_overrides(base, overrides, Self::preset)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
