//! Expression modulation, the blendshape head and the end-to-end forward pass.

use ndarray::Array2;

use super::encoders::{audio_graph, blend_graph, project_graph};
use super::enhancer::{cross_attend_graph, fuse_graph, temporal_graph};
use super::interaction::{align_graph, decode_graph, encode_graph};
use super::{AudioSource, DualSpeakerModel, FeatureSeq, Modulation, Stage, StageInputs, Trace};
use crate::autodiff::{lit, Graph, Scalar, Var};
use crate::config::{AudioEncoderKind, OutputActivation};
use crate::datamodel::{AudioTrack, BlendshapeSeq};
use crate::error::{Error, Result};

/// `D' = D + α·Mod(D)`; with `α = 0` the input handle is returned unchanged.
pub(crate) fn modulate_graph<T: Scalar>(g: &mut Graph<T>, model: &DualSpeakerModel<T>, d: Var) -> Var {
    let alpha = model.config().alpha;
    if alpha == 0.0 {
        return d;
    }
    let m = match &model.layout.modulation {
        Modulation::Linear { w_m } => {
            let x = w_m.apply(g, d);
            g.relu(x)
        }
        Modulation::Mlp { l1, ln, l2 } => {
            let x = l1.apply(g, d);
            let x = ln.apply(g, x);
            let x = g.relu(x);
            l2.apply(g, x)
        }
    };
    let m = g.scale(m, lit(alpha));
    g.add(d, m)
}

/// `D'·W_o + b_o`, optionally squashed by a sigmoid.
pub(crate) fn head_graph<T: Scalar>(g: &mut Graph<T>, model: &DualSpeakerModel<T>, d_prime: Var) -> Var {
    let raw = model.layout.out.apply(g, d_prime);
    match model.config().output_activation {
        OutputActivation::Sigmoid => g.sigmoid(raw),
        OutputActivation::Linear => raw,
    }
}

/// Records the complete network on `g`. The output has as many frames as `inputs.motion_a`.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &DualSpeakerModel<T>,
    inputs: &StageInputs<T>,
) -> Result<Trace> {
    let cfg = model.config();
    let frames = inputs.motion_a.nrows();
    if frames == 0 {
        return Err(Error::validation("motion_a", "needs at least one frame"));
    }
    if inputs.motion_a.ncols() != cfg.b {
        return Err(Error::shape(
            "motion_a",
            format!("{} channels", cfg.b),
            format!("{} channels", inputs.motion_a.ncols()),
        ));
    }
    let mut attention = Vec::new();
    let h_a = audio_graph(g, cfg, &model.layout.audio[0], &inputs.audio_a, frames, &mut attention)?;
    let h_b = audio_graph(g, cfg, &model.layout.audio[1], &inputs.audio_b, frames, &mut attention)?;
    let z_a = project_graph(g, model, h_a);
    let z_b = project_graph(g, model, h_b);
    let m = g.input(inputs.motion_a.clone());
    let m_prime = blend_graph(g, model, m);
    let c = cross_attend_graph(g, model, z_a, m_prime, &mut attention);
    let t = temporal_graph(g, model, c);
    let i = fuse_graph(g, z_a, t);
    let f_prime = encode_graph(g, model, i, &mut attention);
    let f_dprime = align_graph(g, model, f_prime, &mut attention);
    let d = decode_graph(g, model, z_b, f_dprime, &mut attention);
    let d_prime = modulate_graph(g, model, d);
    let output = head_graph(g, model, d_prime);
    Ok(Trace {
        stages: vec![
            (Stage::HA, h_a),
            (Stage::HB, h_b),
            (Stage::ZA, z_a),
            (Stage::ZB, z_b),
            (Stage::MAPrime, m_prime),
            (Stage::C, c),
            (Stage::T, t),
            (Stage::I, i),
            (Stage::FPrime, f_prime),
            (Stage::FDPrime, f_dprime),
            (Stage::D, d),
            (Stage::DPrime, d_prime),
        ],
        output,
        attention,
    })
}

impl<T: Scalar> DualSpeakerModel<T> {
    pub fn modulate_expression(&self, d: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        d.expect(Stage::D, self.config())?;
        let values = self.eval_graph(|g| {
            let x = g.input(d.values.clone());
            let y = modulate_graph(g, self, x);
            Ok(g.value(y).clone())
        })?;
        FeatureSeq::new(values, Stage::DPrime)
    }

    /// Normalized-space blendshapes `[L × b]`.
    pub fn predict_blendshapes(&self, d_prime: &FeatureSeq<T>) -> Result<Array2<T>> {
        d_prime.expect(Stage::DPrime, self.config())?;
        self.eval_graph(|g| {
            let x = g.input(d_prime.values.clone());
            let y = head_graph(g, self, x);
            Ok(g.value(y).clone())
        })
    }

    /// Evaluation-mode forward pass; returns normalized-space predictions `[N × b]`.
    pub fn forward_inputs(&self, inputs: &StageInputs<T>) -> Result<Array2<T>> {
        self.eval_graph(|g| {
            let trace = build_forward(g, self, inputs)?;
            let out = g.value(trace.output).clone();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("model output".into()));
            }
            Ok(out)
        })
    }

    /// Every intermediate representation of one evaluation-mode pass, in pipeline order,
    /// followed by the prediction.
    pub fn forward_stages(&self, inputs: &StageInputs<T>) -> Result<(Vec<FeatureSeq<T>>, Array2<T>)> {
        self.eval_graph(|g| {
            let trace = build_forward(g, self, inputs)?;
            let stages = trace
                .stages
                .iter()
                .map(|&(s, v)| FeatureSeq::new(g.value(v).clone(), s))
                .collect::<Result<Vec<_>>>()?;
            Ok((stages, g.value(trace.output).clone()))
        })
    }
}

impl DualSpeakerModel<f32> {
    /// Predicts Speaker B's motion (normalized space) from both audio tracks and Speaker A's
    /// normalized motion. Output frames equal `motion_a` frames.
    pub fn forward(&self, audio_a: &AudioTrack, motion_a: &BlendshapeSeq, audio_b: &AudioTrack) -> Result<BlendshapeSeq> {
        let cfg = self.config();
        if cfg.audio_encoder != AudioEncoderKind::ToyConv {
            return Err(Error::validation(
                "audio_encoder",
                "forward over raw audio needs the toy_conv encoder; use forward_features",
            ));
        }
        let period = 1.0 / motion_a.fps;
        for (name, track) in [("audio_a", audio_a), ("audio_b", audio_b)] {
            if track.sample_rate != cfg.sample_rate {
                return Err(Error::validation(
                    name,
                    format!("{} Hz, model expects {} Hz", track.sample_rate, cfg.sample_rate),
                ));
            }
            if (track.duration_s() - motion_a.duration_s()).abs() > period + 1e-9 {
                return Err(Error::validation(
                    name,
                    format!(
                        "duration {:.3} s differs from motion {:.3} s by more than one frame",
                        track.duration_s(),
                        motion_a.duration_s()
                    ),
                ));
            }
        }
        let inputs = StageInputs {
            audio_a: AudioSource::from_track(audio_a),
            motion_a: motion_a.values.clone(),
            audio_b: AudioSource::from_track(audio_b),
        };
        let out = self.forward_inputs(&inputs)?;
        BlendshapeSeq::new(out, motion_a.fps, cfg.layout.clone())
    }

    /// Forward pass from precomputed audio features (`feature_file` encoder).
    pub fn forward_features(&self, h_a: &Array2<f32>, motion_a: &BlendshapeSeq, h_b: &Array2<f32>) -> Result<BlendshapeSeq> {
        let inputs = StageInputs {
            audio_a: AudioSource::Features(h_a.clone()),
            motion_a: motion_a.values.clone(),
            audio_b: AudioSource::Features(h_b.clone()),
        };
        let out = self.forward_inputs(&inputs)?;
        BlendshapeSeq::new(out, motion_a.fps, self.config().layout.clone())
    }
}
