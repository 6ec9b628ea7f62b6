//! Transformer encoding of the fused features, windowed alignment attention and the decoder.

use super::layers::{positional_encoding, residual_norm};
use super::{check_rows, DualSpeakerModel, FeatureSeq, Stage};
use crate::autodiff::{AttnMask, Graph, Scalar, Var};
use crate::config::{DecoderInput, ModelConfig};
use crate::error::Result;

/// Query `i` sees keys `j` with `i - w < j <= i`.
pub fn alignment_mask(cfg: &ModelConfig) -> AttnMask {
    AttnMask::Causal {
        window: cfg.mask_window,
    }
}

pub(crate) fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &DualSpeakerModel<T>,
    i: Var,
    probes: &mut Vec<Var>,
) -> Var {
    let cfg = model.config();
    let x = model.layout.p_i.apply(g, i);
    let (len, d) = g.shape(x);
    let pe = g.input(positional_encoding(len, d));
    let mut x = g.add(x, pe);
    for layer in &model.layout.enc {
        x = layer.apply(g, x, AttnMask::None, cfg.dropout, probes);
    }
    x
}

/// `f'' = LN(f' + Attn(f', f'; alignment mask))`
pub(crate) fn align_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &DualSpeakerModel<T>,
    f_prime: Var,
    probes: &mut Vec<Var>,
) -> Var {
    let cfg = model.config();
    let (attn, norm) = &model.layout.align;
    let a = attn.apply(g, f_prime, f_prime, alignment_mask(cfg), probes);
    residual_norm(g, f_prime, a, norm, cfg.dropout)
}

/// Decoder over `Z_B + PE` with causal self-attention and alignment-masked cross-attention
/// into `f''`.
pub(crate) fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &DualSpeakerModel<T>,
    z_b: Var,
    f_dprime: Var,
    probes: &mut Vec<Var>,
) -> Var {
    let cfg = model.config();
    let (len, d) = g.shape(z_b);
    let pe = g.input(positional_encoding(len, d));
    let mut x = match cfg.decoder_input {
        DecoderInput::AudioB => g.add(z_b, pe),
        DecoderInput::Zeros => pe,
    };
    let self_mask = AttnMask::Causal { window: None };
    let cross_mask = alignment_mask(cfg);
    for layer in &model.layout.dec {
        x = layer.apply(g, x, f_dprime, self_mask, cross_mask, cfg.dropout, probes);
    }
    x
}

impl<T: Scalar> DualSpeakerModel<T> {
    pub fn encode_interaction(&self, i: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        i.expect(Stage::I, self.config())?;
        let values = self.eval_graph(|g| {
            let x = g.input(i.values.clone());
            let f = encode_graph(g, self, x, &mut Vec::new());
            Ok(g.value(f).clone())
        })?;
        FeatureSeq::new(values, Stage::FPrime)
    }

    pub fn modal_align(&self, f_prime: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        self.modal_align_with_weights(f_prime).map(|(f, _)| f)
    }

    pub fn modal_align_with_weights(
        &self,
        f_prime: &FeatureSeq<T>,
    ) -> Result<(FeatureSeq<T>, Vec<ndarray::Array2<T>>)> {
        f_prime.expect(Stage::FPrime, self.config())?;
        let (values, weights) = self.eval_graph(|g| {
            let x = g.input(f_prime.values.clone());
            let mut probes = Vec::new();
            let f = align_graph(g, self, x, &mut probes);
            let weights = probes.iter().map(|&p| g.value(p).clone()).collect();
            Ok((g.value(f).clone(), weights))
        })?;
        Ok((FeatureSeq::new(values, Stage::FDPrime)?, weights))
    }

    pub fn decode_interaction(&self, z_b: &FeatureSeq<T>, f_dprime: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        z_b.expect(Stage::ZB, self.config())?;
        f_dprime.expect(Stage::FDPrime, self.config())?;
        check_rows("f''", z_b.len(), f_dprime.len())?;
        let values = self.eval_graph(|g| {
            let x = g.input(z_b.values.clone());
            let mem = g.input(f_dprime.values.clone());
            let out = decode_graph(g, self, x, mem, &mut Vec::new());
            Ok(g.value(out).clone())
        })?;
        FeatureSeq::new(values, Stage::D)
    }
}
