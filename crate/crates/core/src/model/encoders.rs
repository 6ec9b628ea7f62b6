//! Per-speaker audio encoders, the shared audio projection and the blendshape MLP.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AudioEncoderParams, AudioSource, DualSpeakerModel, FeatureSeq, Stage};
use crate::autodiff::{lit, AttnMask, Graph, Scalar, Var};
use crate::config::{AudioEncoderKind, ModelConfig};
use crate::datamodel::{read_json, read_payload, write_json, write_payload, AudioTrack, Speaker};
use crate::error::{Error, Result};

/// Audio features `[frames × D_enc]`. The conv encoder cuts the zero-padded track into windows of
/// `sample_rate / fps` samples (stride = kernel at every level, so windows never overlap), applies
/// causal self-attention with a residual connection, and interpolates to `frames` rows when the
/// window count differs.
pub(crate) fn audio_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    enc: &AudioEncoderParams,
    src: &AudioSource<T>,
    frames: usize,
    probes: &mut Vec<Var>,
) -> Result<Var> {
    match (cfg.audio_encoder, src) {
        (AudioEncoderKind::ToyConv, AudioSource::Samples(samples)) => {
            let hop = cfg.hop();
            if samples.len() < hop {
                return Err(Error::validation(
                    "audio",
                    format!("{} samples is shorter than one frame ({hop})", samples.len()),
                ));
            }
            let windows = samples.len().div_ceil(hop);
            let gain = lit::<T>(cfg.waveform_gain);
            let mut padded: Vec<T> = samples.iter().map(|&v| v * gain).collect();
            padded.resize(windows * hop, T::zero());
            let s0 = cfg.conv_strides[0];
            let input = Array2::from_shape_vec((windows * hop / s0, s0), padded)
                .expect("padded length is a multiple of the first stride");
            let mut x = g.input(input);
            for (k, conv) in enc.convs.iter().enumerate() {
                if k > 0 {
                    let (rows, cols) = g.shape(x);
                    let stride = cfg.conv_strides[k];
                    x = g.reshape(x, rows / stride, cols * stride);
                }
                x = conv.apply(g, x);
                x = g.gelu(x);
            }
            let mask = AttnMask::Causal { window: None };
            for attn in &enc.attn {
                let a = attn.apply(g, x, x, mask, probes);
                x = g.add(x, a);
            }
            Ok(g.resample_rows(x, frames))
        }
        (AudioEncoderKind::FeatureFile, AudioSource::Features(h)) => {
            if h.ncols() != cfg.d_enc {
                return Err(Error::shape(
                    "audio features",
                    format!("{} columns", cfg.d_enc),
                    format!("{} columns", h.ncols()),
                ));
            }
            if h.nrows() == 0 {
                return Err(Error::validation("audio features", "no frames"));
            }
            let x = g.input(h.clone());
            Ok(g.resample_rows(x, frames))
        }
        (AudioEncoderKind::ToyConv, AudioSource::Features(_)) => Err(Error::validation(
            "audio_encoder",
            "toy_conv expects raw samples, got features",
        )),
        (AudioEncoderKind::FeatureFile, AudioSource::Samples(_)) => Err(Error::validation(
            "audio_encoder",
            "feature_file expects precomputed features, got raw samples",
        )),
    }
}

/// `Z = H · W_aᵀ`
pub(crate) fn project_graph<T: Scalar>(g: &mut Graph<T>, model: &DualSpeakerModel<T>, h: Var) -> Var {
    let w_a = g.param(model.layout.w_a);
    g.matmul_t(h, w_a)
}

/// `M' = ReLU(ReLU(M·W_b1 + b1)·W_b2 + b2)`
pub(crate) fn blend_graph<T: Scalar>(g: &mut Graph<T>, model: &DualSpeakerModel<T>, m: Var) -> Var {
    let h = model.layout.blend1.apply(g, m);
    let h = g.relu(h);
    let h = model.layout.blend2.apply(g, h);
    g.relu(h)
}

impl<T: Scalar> AudioSource<T> {
    pub fn from_track(track: &AudioTrack) -> Self {
        AudioSource::Samples(track.samples.iter().map(|&s| lit(s as f64)).collect())
    }

    pub fn from_features(h: &Array2<f32>) -> Self {
        AudioSource::Features(h.mapv(|v| lit(v as f64)))
    }
}

impl<T: Scalar> DualSpeakerModel<T> {
    /// Audio features for one speaker at `round(duration · fps)` frames. `side` selects the
    /// speaker's own encoder parameters.
    pub fn encode_audio(&self, track: &AudioTrack, side: Speaker) -> Result<FeatureSeq<T>> {
        if track.sample_rate != self.config().sample_rate {
            return Err(Error::validation(
                "sample_rate",
                format!(
                    "track is {} Hz, model expects {} Hz",
                    track.sample_rate,
                    self.config().sample_rate
                ),
            ));
        }
        let frames = (track.duration_s() * self.config().fps).round() as usize;
        self.encode_audio_frames(&AudioSource::from_track(track), side, frames.max(1))
    }

    pub fn encode_audio_frames(&self, src: &AudioSource<T>, side: Speaker, frames: usize) -> Result<FeatureSeq<T>> {
        let (enc, stage) = match side {
            Speaker::A => (&self.layout.audio[0], Stage::HA),
            Speaker::B => (&self.layout.audio[1], Stage::HB),
        };
        let cfg = self.config().clone();
        let values = self.eval_graph(|g| {
            let h = audio_graph(g, &cfg, enc, src, frames, &mut Vec::new())?;
            Ok(g.value(h).clone())
        })?;
        FeatureSeq::new(values, stage)
    }

    /// Shared projection; `H_A → Z_A`, `H_B → Z_B`.
    pub fn project_audio(&self, h: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        let stage = match h.stage {
            Stage::HA => Stage::ZA,
            Stage::HB => Stage::ZB,
            other => {
                return Err(Error::validation(
                    "stage",
                    format!("project_audio expects H_A or H_B, got {other}"),
                ))
            }
        };
        h.expect(h.stage, self.config())?;
        let values = self.eval_graph(|g| {
            let x = g.input(h.values.clone());
            let z = project_graph(g, self, x);
            Ok(g.value(z).clone())
        })?;
        FeatureSeq::new(values, stage)
    }

    /// Blendshape MLP over a normalized `[N × b]` motion matrix.
    pub fn encode_blendshapes(&self, motion: &Array2<T>) -> Result<FeatureSeq<T>> {
        if motion.ncols() != self.config().b {
            return Err(Error::shape(
                "motion",
                format!("{} channels", self.config().b),
                format!("{} channels", motion.ncols()),
            ));
        }
        if motion.nrows() == 0 {
            return Err(Error::validation("motion", "needs at least one frame"));
        }
        let values = self.eval_graph(|g| {
            let m = g.input(motion.clone());
            let out = blend_graph(g, self, m);
            Ok(g.value(out).clone())
        })?;
        FeatureSeq::new(values, Stage::MAPrime)
    }
}

/// Sidecar of a precomputed audio feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMeta {
    pub frames: usize,
    pub dim: usize,
    pub source: String,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<stem>.f32` (row-major little-endian `[frames × dim]`) and `<stem>.json`.
pub fn write_features(stem: &Path, values: &Array2<f32>, source: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("features for {}", stem.display())));
    }
    write_payload(&with_suffix(stem, ".f32"), values)?;
    let meta = FeatureMeta {
        frames: values.nrows(),
        dim: values.ncols(),
        source: source.to_string(),
    };
    write_json(&with_suffix(stem, ".json"), &meta)
}

pub fn read_features(stem: &Path) -> Result<(Array2<f32>, FeatureMeta)> {
    let meta: FeatureMeta = read_json(&with_suffix(stem, ".json"))?;
    let values = read_payload(&with_suffix(stem, ".f32"), meta.frames, meta.dim)?;
    Ok((values, meta))
}
