//! The dual-speaker network: joint encoder, cross-modal temporal enhancer, interaction module
//! and expressive synthesis head.
//!
//! Every stage is a graph builder over [`Graph`], so the same code serves evaluation, training
//! (with dropout) and the `f64` gradient check. The public stage methods on
//! [`DualSpeakerModel`] wrap single stages for inspection and testing; [`build_forward`]
//! composes all of them.

mod encoders;
mod enhancer;
mod interaction;
mod layers;
mod synthesis;

use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamBuilder, ParamId, ParamStore, Scalar, Var};
use crate::config::{AudioEncoderKind, ModVariant, ModelConfig};
use crate::error::{Error, Result};

pub use encoders::{read_features, write_features, FeatureMeta};
pub use layers::positional_encoding;
pub use synthesis::build_forward;

use layers::{Attention, BiLstmLayer, DecoderLayer, EncoderLayer, Linear, Norm};

/// Identifies the intermediate representation a [`FeatureSeq`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    HA,
    HB,
    ZA,
    ZB,
    MAPrime,
    C,
    T,
    I,
    FPrime,
    FDPrime,
    D,
    DPrime,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::HA,
        Stage::HB,
        Stage::ZA,
        Stage::ZB,
        Stage::MAPrime,
        Stage::C,
        Stage::T,
        Stage::I,
        Stage::FPrime,
        Stage::FDPrime,
        Stage::D,
        Stage::DPrime,
    ];

    /// Feature width this stage carries under `cfg`.
    pub fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            Stage::HA | Stage::HB => cfg.d_enc,
            Stage::I => 2 * cfg.d,
            _ => cfg.d,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::HA => "H_A",
            Stage::HB => "H_B",
            Stage::ZA => "Z_A",
            Stage::ZB => "Z_B",
            Stage::MAPrime => "M'_A",
            Stage::C => "C",
            Stage::T => "T",
            Stage::I => "I",
            Stage::FPrime => "f'",
            Stage::FDPrime => "f''",
            Stage::D => "D",
            Stage::DPrime => "D'",
        };
        f.write_str(name)
    }
}

/// A stage-tagged `[L × dim]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq<T = f32> {
    pub values: Array2<T>,
    pub stage: Stage,
}

impl<T: Scalar> FeatureSeq<T> {
    pub fn new(values: Array2<T>, stage: Stage) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::validation(format!("{stage}"), "needs at least one frame"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stage {stage}")));
        }
        Ok(Self { values, stage })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub(crate) fn expect(&self, stage: Stage, cfg: &ModelConfig) -> Result<()> {
        if self.stage != stage {
            return Err(Error::validation(
                "stage",
                format!("expected {stage} features, got {}", self.stage),
            ));
        }
        if self.dim() != stage.width(cfg) {
            return Err(Error::shape(
                format!("{stage} features"),
                format!("{} columns", stage.width(cfg)),
                format!("{} columns", self.dim()),
            ));
        }
        Ok(())
    }
}

/// Audio as consumed by the encoder: raw samples (conv encoder) or precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioSource<T> {
    Samples(Vec<T>),
    Features(Array2<T>),
}

/// Inputs of one forward pass in working precision. `motion_a` is in normalized space.
#[derive(Clone, Debug)]
pub struct StageInputs<T> {
    pub audio_a: AudioSource<T>,
    pub motion_a: Array2<T>,
    pub audio_b: AudioSource<T>,
}

/// Graph handles of every stage of a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub stages: Vec<(Stage, Var)>,
    pub output: Var,
    /// Every attention weight matrix computed, one per head and layer.
    pub attention: Vec<Var>,
}

impl Trace {
    pub fn get(&self, stage: Stage) -> Var {
        self.stages
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, v)| *v)
            .expect("every stage is recorded")
    }
}

pub(crate) struct AudioEncoderParams {
    pub convs: Vec<Linear>,
    pub attn: Vec<Attention>,
}

pub(crate) enum Modulation {
    Linear { w_m: Linear },
    Mlp { l1: Linear, ln: Norm, l2: Linear },
}

/// Handles of every learnable tensor, registered in a fixed declaration order.
pub(crate) struct Layout {
    pub audio: [AudioEncoderParams; 2],
    pub w_a: ParamId,
    pub blend1: Linear,
    pub blend2: Linear,
    pub xattn: Attention,
    pub lstm: Vec<BiLstmLayer>,
    pub p_t: Linear,
    pub p_i: Linear,
    pub enc: Vec<EncoderLayer>,
    pub align: (Attention, Norm),
    pub dec: Vec<DecoderLayer>,
    pub modulation: Modulation,
    pub out: Linear,
}

impl Layout {
    fn build<T: Scalar>(cfg: &ModelConfig, pb: &mut ParamBuilder<T>) -> Self {
        let d = cfg.d;
        let scale = cfg.attention_scale();
        let mut audio = |tag: &str| {
            let mut convs = Vec::new();
            let mut attn = Vec::new();
            if cfg.audio_encoder == AudioEncoderKind::ToyConv {
                let mut width = 1;
                for (k, &stride) in cfg.conv_strides.iter().enumerate() {
                    let out = cfg.conv_channels.get(k).copied().unwrap_or(cfg.d_enc);
                    convs.push(Linear::new(pb, &format!("{tag}.conv{k}"), width * stride, out, true));
                    width = out;
                }
                for k in 0..cfg.audio_attn_layers {
                    let name = format!("{tag}.attn{k}");
                    let scale = 1.0 / (cfg.d_enc as f64).sqrt();
                    attn.push(Attention::new(pb, &name, cfg.d_enc, 1, scale, true));
                }
            }
            AudioEncoderParams { convs, attn }
        };
        let audio = [audio("audio_a"), audio("audio_b")];
        let w_a = pb.add("proj.w_a", d, cfg.d_enc, crate::autodiff::Init::FanIn(cfg.d_enc));
        let blend1 = Linear::new(pb, "blend.l1", cfg.b, d / 2, true);
        let blend2 = Linear::new(pb, "blend.l2", d / 2, d, true);
        let xattn = Attention::new(pb, "xattn", d, cfg.heads, scale, false);
        let lstm = (0..cfg.lstm_layers)
            .map(|k| {
                let inp = if k == 0 { d } else { 2 * cfg.lstm_hidden };
                BiLstmLayer::new(pb, &format!("lstm{k}"), inp, cfg.lstm_hidden)
            })
            .collect();
        let p_t = Linear::new(pb, "proj.p_t", 2 * cfg.lstm_hidden, d, true);
        let p_i = Linear::new(pb, "proj.p_i", 2 * d, d, true);
        let enc = (0..cfg.enc_layers)
            .map(|k| EncoderLayer::new(pb, &format!("enc{k}"), d, cfg.heads, cfg.ffn_dim, scale))
            .collect();
        let align = (
            Attention::new(pb, "align", d, cfg.heads, scale, true),
            Norm::new(pb, "align.ln", d),
        );
        let dec = (0..cfg.dec_layers)
            .map(|k| DecoderLayer::new(pb, &format!("dec{k}"), d, cfg.heads, cfg.ffn_dim, scale))
            .collect();
        let modulation = match cfg.mod_variant {
            ModVariant::Linear => Modulation::Linear {
                w_m: Linear::new(pb, "mod.w_m", d, d, true),
            },
            ModVariant::Mlp => Modulation::Mlp {
                l1: Linear::new(pb, "mod.l1", d, 2 * d, true),
                ln: Norm::new(pb, "mod.ln", 2 * d),
                l2: Linear::new(pb, "mod.l2", 2 * d, d, true),
            },
        };
        let out = Linear::new(pb, "head.w_o", d, cfg.b, true);
        Self {
            audio,
            w_a,
            blend1,
            blend2,
            xattn,
            lstm,
            p_t,
            p_i,
            enc,
            align,
            dec,
            modulation,
            out,
        }
    }
}

/// Configuration, parameter layout and parameter values of the network.
pub struct DualSpeakerModel<T: Scalar = f32> {
    cfg: ModelConfig,
    pub(crate) layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> DualSpeakerModel<T> {
    /// Fresh weights: uniform `±1/sqrt(fan_in)` matrices, zero biases, unit forget-gate biases,
    /// identity layer norms. Initialization is a pure function of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let layout = Layout::build(&cfg, &mut pb);
        let params = pb.store;
        Ok(Self { cfg, layout, params })
    }

    /// Wraps existing parameter values; names and shapes must match the layout of `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(cfg, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::shape(
                "model parameters",
                format!("{} tensors", reference.params.len()),
                format!("{} tensors", params.len()),
            ));
        }
        for ((_, name_r, v_r), (_, name, v)) in reference.params.iter().zip(params.iter()) {
            if name_r != name || v_r.dim() != v.dim() {
                return Err(Error::shape(
                    format!("parameter {name_r}"),
                    format!("{name_r} {:?}", v_r.dim()),
                    format!("{name} {:?}", v.dim()),
                ));
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            cfg: reference.cfg,
            layout: reference.layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }

    pub fn cast<U: Scalar>(&self) -> DualSpeakerModel<U> {
        DualSpeakerModel::from_params(self.cfg.clone(), self.params.cast())
            .expect("same layout in another precision")
    }

    /// Runs `f` on a fresh evaluation graph over this model's parameters.
    pub(crate) fn eval_graph<R>(&self, f: impl FnOnce(&mut Graph<T>) -> Result<R>) -> Result<R> {
        let mut g = Graph::new(&self.params, crate::autodiff::Mode::Eval);
        f(&mut g)
    }
}

impl<T: Scalar> Clone for DualSpeakerModel<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.cfg.clone(), self.params.clone()).expect("valid model")
    }
}

impl<T: Scalar> fmt::Debug for DualSpeakerModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualSpeakerModel")
            .field("cfg", &self.cfg)
            .field("tensors", &self.params.len())
            .field("scalars", &self.params.num_scalars())
            .finish()
    }
}

pub(crate) fn check_rows(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::shape(
            context,
            format!("{expected} frames"),
            format!("{found} frames"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
