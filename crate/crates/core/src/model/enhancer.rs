//! Audio-queried cross-attention over motion features, bidirectional recurrence, and fusion.

use super::{check_rows, DualSpeakerModel, FeatureSeq, Stage};
use crate::autodiff::{AttnMask, Graph, Scalar, Var};
use crate::error::Result;

/// `C = softmax(Q Kᵀ · scale) V` per head with `Q = Z_A W_q`, `K = M' W_k`, `V = M' W_v`.
pub(crate) fn cross_attend_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &DualSpeakerModel<T>,
    z_a: Var,
    m_prime: Var,
    probes: &mut Vec<Var>,
) -> Var {
    model.layout.xattn.apply(g, z_a, m_prime, AttnMask::None, probes)
}

/// Stacked bidirectional LSTM `[L × d] → [L × 2h]` followed by `P_t: 2h → d`.
pub(crate) fn temporal_graph<T: Scalar>(g: &mut Graph<T>, model: &DualSpeakerModel<T>, c: Var) -> Var {
    let dropout = model.config().dropout;
    let mut x = c;
    for (k, layer) in model.layout.lstm.iter().enumerate() {
        if k > 0 {
            x = g.dropout(x, dropout);
        }
        x = layer.apply(g, x);
    }
    model.layout.p_t.apply(g, x)
}

/// `I = [Z_A ‖ T]`
pub(crate) fn fuse_graph<T: Scalar>(g: &mut Graph<T>, z_a: Var, t: Var) -> Var {
    g.concat_cols(&[z_a, t])
}

impl<T: Scalar> DualSpeakerModel<T> {
    pub fn cross_attend(&self, z_a: &FeatureSeq<T>, m_prime: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        self.cross_attend_with_weights(z_a, m_prime).map(|(c, _)| c)
    }

    /// Also returns the per-head attention weight matrices `[L × L]`.
    pub fn cross_attend_with_weights(
        &self,
        z_a: &FeatureSeq<T>,
        m_prime: &FeatureSeq<T>,
    ) -> Result<(FeatureSeq<T>, Vec<ndarray::Array2<T>>)> {
        z_a.expect(Stage::ZA, self.config())?;
        m_prime.expect(Stage::MAPrime, self.config())?;
        check_rows("M'_A", z_a.len(), m_prime.len())?;
        let (values, weights) = self.eval_graph(|g| {
            let q = g.input(z_a.values.clone());
            let kv = g.input(m_prime.values.clone());
            let mut probes = Vec::new();
            let c = cross_attend_graph(g, self, q, kv, &mut probes);
            let weights = probes.iter().map(|&p| g.value(p).clone()).collect();
            Ok((g.value(c).clone(), weights))
        })?;
        Ok((FeatureSeq::new(values, Stage::C)?, weights))
    }

    /// Evaluation mode: dropout is off and repeated calls agree bit for bit.
    pub fn temporal_enhance(&self, c: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        c.expect(Stage::C, self.config())?;
        let values = self.eval_graph(|g| {
            let x = g.input(c.values.clone());
            let t = temporal_graph(g, self, x);
            Ok(g.value(t).clone())
        })?;
        FeatureSeq::new(values, Stage::T)
    }

    pub fn fuse_features(&self, z_a: &FeatureSeq<T>, t: &FeatureSeq<T>) -> Result<FeatureSeq<T>> {
        z_a.expect(Stage::ZA, self.config())?;
        t.expect(Stage::T, self.config())?;
        check_rows("T", z_a.len(), t.len())?;
        let values = self.eval_graph(|g| {
            let a = g.input(z_a.values.clone());
            let b = g.input(t.values.clone());
            let i = fuse_graph(g, a, b);
            Ok(g.value(i).clone())
        })?;
        FeatureSeq::new(values, Stage::I)
    }
}
