use ndarray::{concatenate, s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{lit, ParamId, ParamStore, Scalar};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled; repeated evaluation is bit-identical.
    Eval,
    /// Dropout enabled, masks drawn from a stream seeded by `seed`.
    Train { seed: u64 },
}

/// Additive attention bias pattern. Disallowed entries behave as `-inf` logits: they receive
/// exactly zero weight and the remaining weights renormalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` may attend key `j` iff `i - w < j <= i`; `window = None` means `w = ∞`.
    Causal { window: Option<usize> },
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            AttnMask::None => true,
            AttnMask::Causal { window } => j <= i && window.is_none_or(|w| i - j < w),
        }
    }
}

struct LstmCache<T> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    /// Post-activation gates per time index, columns `[i | f | g | o]`.
    gates: Array2<T>,
    cell_tanh: Array2<T>,
    /// Hidden state entering the step at each time index (zero for the first processed step).
    h_prev: Array2<T>,
    /// Cell state entering the step at each time index.
    c_prev: Array2<T>,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Dropout(Var, Array2<T>),
    Lstm(Box<LstmCache<T>>),
    /// Each output row is `(1 - w) * x[lo] + w * x[hi]`.
    Resample(Var, Vec<(usize, usize, T)>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    /// One entry per parameter in the store, zero for parameters that were not used.
    pub params: Vec<Array2<T>>,
    nodes: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded node (e.g. an input), if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }
}

/// A tape of operations over one parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    track_kinks: bool,
    kink_signature: u64,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        let seed = match mode {
            Mode::Eval => 0,
            Mode::Train { seed } => seed,
        };
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            track_kinks: false,
            kink_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Record the sign pattern of every ReLU input so finite-difference checks can tell when a
    /// perturbation crossed a non-differentiable point.
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `[1 × n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let mut h = self.kink_signature;
            for &x in self.nodes[a.0].value.iter() {
                h ^= (x > T::zero()) as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            self.kink_signature = h;
        }
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| gelu(x).0);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise softmax with disallowed entries forced to exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: AttnMask) -> Var {
        let x = self.value(a);
        let mut out = Array2::<T>::zeros(x.raw_dim());
        for (i, (row, mut orow)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if mask.allows(i, j) && v > max {
                    max = v;
                }
            }
            assert!(max.is_finite(), "softmax row {i} has no admissible finite entry");
            let mut sum = T::zero();
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if mask.allows(i, j) {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            orow.mapv_inplace(|e| e / sum);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self
            .value(a)
            .slice(s![.., start..start + width])
            .as_standard_layout()
            .into_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape: element count mismatch");
        self.push(value, Op::Reshape(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps: T = lit(1e-5);
        let xv = self.value(x);
        let n = lit::<T>(xv.ncols() as f64);
        let mut xhat = Array2::<T>::zeros(xv.raw_dim());
        let mut inv_std = Array1::<T>::zeros(xv.nrows());
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            Zip::from(xhat.row_mut(i))
                .and(&row)
                .for_each(|h, &v| *h = (v - mean) * is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.is_training() || p <= 0.0 {
            return a;
        }
        let keep = lit::<T>(1.0 / (1.0 - p));
        let (r, c) = self.shape(a);
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let value = self.value(a) * &mask;
        self.push(value, Op::Dropout(a, mask))
    }

    /// One direction of an LSTM over the whole sequence.
    ///
    /// `x: [L × in]`, `w_ih: [in × 4h]`, `w_hh: [h × 4h]`, `bias: [1 × 4h]`; gate column order is
    /// input, forget, cell, output. Returns hidden states `[L × h]` indexed by time, so a
    /// reversed pass still lines up with the input rows.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Var {
        let len = self.shape(x).0;
        let hidden = self.shape(w_hh).0;
        assert_eq!(self.shape(w_ih).1, 4 * hidden, "lstm: w_ih width");
        assert_eq!(self.shape(w_hh).1, 4 * hidden, "lstm: w_hh width");
        let pre_in = self.value(x).dot(self.value(w_ih)) + self.value(bias);
        let w_hh_v = self.value(w_hh);

        let mut gates = Array2::<T>::zeros((len, 4 * hidden));
        let mut cell_tanh = Array2::<T>::zeros((len, hidden));
        let mut out = Array2::<T>::zeros((len, hidden));
        let mut h_prev_all = Array2::<T>::zeros((len, hidden));
        let mut c_prev_all = Array2::<T>::zeros((len, hidden));

        let mut h = Array1::<T>::zeros(hidden);
        let mut c = Array1::<T>::zeros(hidden);
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            h_prev_all.row_mut(t).assign(&h);
            c_prev_all.row_mut(t).assign(&c);
            let pre = &pre_in.row(t) + &h.dot(w_hh_v);
            let mut grow = gates.row_mut(t);
            for k in 0..hidden {
                let ig = sigmoid(pre[k]);
                let fg = sigmoid(pre[hidden + k]);
                let gg = pre[2 * hidden + k].tanh();
                let og = sigmoid(pre[3 * hidden + k]);
                grow[k] = ig;
                grow[hidden + k] = fg;
                grow[2 * hidden + k] = gg;
                grow[3 * hidden + k] = og;
                let cn = fg * c[k] + ig * gg;
                let ct = cn.tanh();
                c[k] = cn;
                h[k] = og * ct;
                cell_tanh[[t, k]] = ct;
            }
            out.row_mut(t).assign(&h);
        }
        self.push(
            out,
            Op::Lstm(Box::new(LstmCache {
                x,
                w_ih,
                w_hh,
                bias,
                reverse,
                gates,
                cell_tanh,
                h_prev: h_prev_all,
                c_prev: c_prev_all,
            })),
        )
    }

    /// Linear interpolation along rows to `target` rows using centre-aligned sample positions.
    pub fn resample_rows(&mut self, a: Var, target: usize) -> Var {
        let src = self.shape(a).0;
        if src == target {
            return a;
        }
        let plan = resample_plan::<T>(src, target);
        let x = self.value(a);
        let mut out = Array2::<T>::zeros((target, x.ncols()));
        for (i, &(lo, hi, w)) in plan.iter().enumerate() {
            let row = &x.row(lo) * (T::one() - w) + &x.row(hi) * w;
            out.row_mut(i).assign(&row);
        }
        self.push(out, Op::Resample(a, plan))
    }

    /// Reverse pass seeded with `seed = ∂loss/∂out`.
    pub fn backward(&self, out: Var, seed: Array2<T>) -> Gradients<T> {
        assert_eq!(seed.dim(), self.shape(out), "backward: seed shape");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                // leaves keep their gradient for `wrt` and parameter extraction
                Op::Leaf | Op::Param => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *b, g.clone());
                    accum(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, *row, dr);
                    accum(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accum(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accum(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu(x).1);
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (T::one() - y));
                    accum(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for (mut drow, yrow) in d.outer_iter_mut().zip(y.outer_iter()) {
                        let dot = drow.dot(&yrow);
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d = y * (*d - dot));
                    }
                    accum(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let part = g.slice(s![.., start..start + w]).to_owned();
                        accum(&mut grads, *p, part);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::<T>::zeros(self.value(*a).raw_dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accum(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let d = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(self.value(*a).raw_dim())
                        .expect("reshape grad");
                    accum(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gam;
                    let n = lit::<T>(xhat.ncols() as f64);
                    let mut dx = Array2::<T>::zeros(xhat.raw_dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[i] / n;
                        Zip::from(dx.row_mut(i))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = is * (n * d - sum_dh - h * sum_dh_xh));
                    }
                    accum(&mut grads, *gamma, dgamma);
                    accum(&mut grads, *beta, dbeta);
                    accum(&mut grads, *x, dx);
                }
                Op::Dropout(a, mask) => accum(&mut grads, *a, g * mask),
                Op::Lstm(cache) => {
                    let (dx, dw_ih, dw_hh, db) = self.lstm_backward(cache, &g);
                    accum(&mut grads, cache.x, dx);
                    accum(&mut grads, cache.w_ih, dw_ih);
                    accum(&mut grads, cache.w_hh, dw_hh);
                    accum(&mut grads, cache.bias, db);
                }
                Op::Resample(a, plan) => {
                    let mut d = Array2::<T>::zeros(self.value(*a).raw_dim());
                    for (i, &(lo, hi, w)) in plan.iter().enumerate() {
                        let gi = g.row(i);
                        d.row_mut(lo).scaled_add(T::one() - w, &gi);
                        d.row_mut(hi).scaled_add(w, &gi);
                    }
                    accum(&mut grads, *a, d);
                }
            }
        }

        let mut params = self.params.zeros_like();
        for (pid, var) in self.param_nodes.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    params[pid] = g;
                }
            }
        }
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn lstm_backward(
        &self,
        cache: &LstmCache<T>,
        dout: &Array2<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
        let len = dout.nrows();
        let hidden = dout.ncols();
        let w_ih = self.value(cache.w_ih);
        let w_hh = self.value(cache.w_hh);
        let mut dpre = Array2::<T>::zeros((len, 4 * hidden));
        let mut dh_next = Array1::<T>::zeros(hidden);
        let mut dc_next = Array1::<T>::zeros(hidden);
        for step in (0..len).rev() {
            let t = if cache.reverse { len - 1 - step } else { step };
            let gates = cache.gates.row(t);
            let ct = cache.cell_tanh.row(t);
            let c_prev = cache.c_prev.row(t);
            let mut drow = dpre.row_mut(t);
            for k in 0..hidden {
                let ig = gates[k];
                let fg = gates[hidden + k];
                let gg = gates[2 * hidden + k];
                let og = gates[3 * hidden + k];
                let dh = dout[[t, k]] + dh_next[k];
                let d_o = dh * ct[k];
                let dc = dc_next[k] + dh * og * (T::one() - ct[k] * ct[k]);
                let di = dc * gg;
                let dg = dc * ig;
                let df = dc * c_prev[k];
                dc_next[k] = dc * fg;
                drow[k] = di * ig * (T::one() - ig);
                drow[hidden + k] = df * fg * (T::one() - fg);
                drow[2 * hidden + k] = dg * (T::one() - gg * gg);
                drow[3 * hidden + k] = d_o * og * (T::one() - og);
            }
            dh_next = w_hh.dot(&dpre.row(t));
        }
        let x = self.value(cache.x);
        let dx = dpre.dot(&w_ih.t());
        let dw_ih = x.t().dot(&dpre);
        let dw_hh = cache.h_prev.t().dot(&dpre);
        let db = dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        (dx, dw_ih, dw_hh, db)
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let k: T = lit(0.797_884_560_802_865_4);
    let c: T = lit(0.044_715);
    let half: T = lit(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * k * (T::one() + lit::<T>(3.0) * c * x * x);
    (y, dy)
}

pub(crate) fn resample_plan<T: Scalar>(src: usize, target: usize) -> Vec<(usize, usize, T)> {
    let ratio = src as f64 / target as f64;
    (0..target)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, lit::<T>(pos - lo as f64))
        })
        .collect()
}
