//! Parameter handles for the reusable blocks and their graph construction.

use ndarray::Array2;

use crate::autodiff::{lit, AttnMask, Graph, Init, ParamBuilder, ParamId, Scalar, Var};

/// Dense layer `x·W (+ b)` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = pb.add(format!("{name}.w"), inp, out, Init::FanIn(inp));
        let b = bias.then(|| pb.add(format!("{name}.b"), 1, out, Init::Zeros));
        Self { w, b }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: pb.add(format!("{name}.gamma"), 1, width, Init::Ones),
            beta: pb.add(format!("{name}.beta"), 1, width, Init::Zeros),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention without biases; the output projection is optional.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Option<ParamId>,
    pub heads: usize,
    pub scale: f64,
}

impl Attention {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        width: usize,
        heads: usize,
        scale: f64,
        out_proj: bool,
    ) -> Self {
        Self {
            wq: pb.add(format!("{name}.wq"), width, width, Init::FanIn(width)),
            wk: pb.add(format!("{name}.wk"), width, width, Init::FanIn(width)),
            wv: pb.add(format!("{name}.wv"), width, width, Init::FanIn(width)),
            wo: out_proj.then(|| pb.add(format!("{name}.wo"), width, width, Init::FanIn(width))),
            heads,
            scale,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`. Attention weight matrices (one per head)
    /// are appended to `probes`.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        xq: Var,
        xkv: Var,
        mask: AttnMask,
        probes: &mut Vec<Var>,
    ) -> Var {
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let q = g.matmul(xq, wq);
        let k = g.matmul(xkv, wk);
        let v = g.matmul(xkv, wv);
        let width = g.shape(q).1;
        let dh = width / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, lit(self.scale));
            let weights = g.softmax_rows(logits, mask);
            probes.push(weights);
            outs.push(g.matmul(weights, vh));
        }
        let out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        match self.wo {
            Some(wo) => {
                let wo = g.param(wo);
                g.matmul(out, wo)
            }
            None => out,
        }
    }
}

/// Position-wise feed-forward block `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(pb, &format!("{name}.ff1"), width, hidden, true),
            l2: Linear::new(pb, &format!("{name}.ff2"), hidden, width, true),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.l1.apply(g, x);
        let h = g.relu(h);
        self.l2.apply(g, h)
    }
}

/// `LN(x + dropout(sub))`
pub(crate) fn residual_norm<T: Scalar>(g: &mut Graph<T>, x: Var, sub: Var, norm: &Norm, dropout: f64) -> Var {
    let sub = g.dropout(sub, dropout);
    let sum = g.add(x, sub);
    norm.apply(g, sum)
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    pub attn: Attention,
    pub ln1: Norm,
    pub ff: FeedForward,
    pub ln2: Norm,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, d: usize, heads: usize, ffn: usize, scale: f64) -> Self {
        Self {
            attn: Attention::new(pb, &format!("{name}.attn"), d, heads, scale, true),
            ln1: Norm::new(pb, &format!("{name}.ln1"), d),
            ff: FeedForward::new(pb, name, d, ffn),
            ln2: Norm::new(pb, &format!("{name}.ln2"), d),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: AttnMask, dropout: f64, probes: &mut Vec<Var>) -> Var {
        let a = self.attn.apply(g, x, x, mask, probes);
        let x = residual_norm(g, x, a, &self.ln1, dropout);
        let f = self.ff.apply(g, x);
        residual_norm(g, x, f, &self.ln2, dropout)
    }
}

/// Post-norm transformer decoder layer: masked self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    pub self_attn: Attention,
    pub ln1: Norm,
    pub cross: Attention,
    pub ln2: Norm,
    pub ff: FeedForward,
    pub ln3: Norm,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, d: usize, heads: usize, ffn: usize, scale: f64) -> Self {
        Self {
            self_attn: Attention::new(pb, &format!("{name}.self"), d, heads, scale, true),
            ln1: Norm::new(pb, &format!("{name}.ln1"), d),
            cross: Attention::new(pb, &format!("{name}.cross"), d, heads, scale, true),
            ln2: Norm::new(pb, &format!("{name}.ln2"), d),
            ff: FeedForward::new(pb, name, d, ffn),
            ln3: Norm::new(pb, &format!("{name}.ln3"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        memory: Var,
        self_mask: AttnMask,
        cross_mask: AttnMask,
        dropout: f64,
        probes: &mut Vec<Var>,
    ) -> Var {
        let a = self.self_attn.apply(g, x, x, self_mask, probes);
        let x = residual_norm(g, x, a, &self.ln1, dropout);
        let c = self.cross.apply(g, x, memory, cross_mask, probes);
        let x = residual_norm(g, x, c, &self.ln2, dropout);
        let f = self.ff.apply(g, x);
        residual_norm(g, x, f, &self.ln3, dropout)
    }
}

/// One bidirectional recurrent layer: forward and backward directions.
#[derive(Clone, Debug)]
pub(crate) struct BiLstmLayer {
    pub dirs: [(ParamId, ParamId, ParamId); 2],
}

impl BiLstmLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, inp: usize, hidden: usize) -> Self {
        let mut dir = |tag: &str| {
            (
                pb.add(format!("{name}.{tag}.w_ih"), inp, 4 * hidden, Init::FanIn(inp)),
                pb.add(format!("{name}.{tag}.w_hh"), hidden, 4 * hidden, Init::FanIn(hidden)),
                pb.add(format!("{name}.{tag}.bias"), 1, 4 * hidden, Init::ForgetGateBias),
            )
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        Self { dirs: [fwd, bwd] }
    }

    /// `[L × in] → [L × 2h]`, forward states first.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut outs = [x; 2];
        for (k, &(w_ih, w_hh, bias)) in self.dirs.iter().enumerate() {
            let w_ih = g.param(w_ih);
            let w_hh = g.param(w_hh);
            let bias = g.param(bias);
            outs[k] = g.lstm(x, w_ih, w_hh, bias, k == 1);
        }
        g.concat_cols(&outs)
    }
}

/// Sinusoidal position table `[len × width]`: even columns sine, odd columns cosine.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Array2<T> {
    Array2::from_shape_fn((len, width), |(pos, c)| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / width as f64);
        lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_table_values() {
        let pe = positional_encoding::<f64>(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[2, 0]] - 2f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 3]] - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }
}
