//! Central finite-difference verification of every parameter gradient in `f64`.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::loss_terms;
use crate::autodiff::{Graph, Mode, ParamStore};
use crate::config::{AudioEncoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{build_forward, AudioSource, DualSpeakerModel, StageInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Entries per tensor: the largest-gradient entry plus random ones.
    pub entries_per_tensor: usize,
    pub frames: usize,
    /// Attempts to find an entry whose perturbation does not cross a ReLU kink.
    pub max_redraws: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            entries_per_tensor: 3,
            frames: 24,
            max_redraws: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Draws rejected because the ±step perturbation changed some ReLU's active set.
    pub kink_redraws: usize,
    pub max_abs_err: f64,
    /// Taken only over entries where the relative bound exceeds the absolute floor.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub loss: f64,
    pub passed: bool,
    pub elapsed_s: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed).collect()
    }
}

/// Random inputs and targets for a gradient check of `model`.
pub fn random_problem(model: &DualSpeakerModel<f64>, frames: usize, seed: u64) -> (StageInputs<f64>, Array2<f64>) {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6752_6164);
    let audio = |rng: &mut ChaCha8Rng| match cfg.audio_encoder {
        AudioEncoderKind::ToyConv => {
            AudioSource::Samples((0..frames * cfg.hop()).map(|_| rng.random_range(-0.5..0.5)).collect())
        }
        AudioEncoderKind::FeatureFile => {
            AudioSource::Features(Array2::from_shape_simple_fn((frames, cfg.d_enc), || rng.random_range(-1.0..1.0)))
        }
    };
    let audio_a = audio(&mut rng);
    let audio_b = audio(&mut rng);
    let motion_a = Array2::from_shape_simple_fn((frames, cfg.b), || rng.random_range(0.0..1.0));
    let target = Array2::from_shape_simple_fn((frames, cfg.b), || rng.random_range(0.05..0.95));
    (StageInputs { audio_a, motion_a, audio_b }, target)
}

/// Loss and ReLU activity signature at `params`.
fn evaluate(cfg: &ModelConfig, params: &ParamStore<f64>, inputs: &StageInputs<f64>, target: &Array2<f64>) -> Result<(f64, u64)> {
    let model = DualSpeakerModel::from_params(cfg.clone(), params.clone())?;
    let mut g = Graph::new(model.params(), Mode::Eval);
    g.track_kinks(true);
    let trace = build_forward(&mut g, &model, inputs)?;
    let terms = loss_terms(g.value(trace.output).view(), target.view(), None)?;
    Ok((terms.total, g.kink_signature()))
}

/// Analytic gradients of `loss_total` for every parameter tensor.
pub fn analytic_gradients(
    model: &DualSpeakerModel<f64>,
    inputs: &StageInputs<f64>,
    target: &Array2<f64>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut g = Graph::new(model.params(), Mode::Eval);
    let trace = build_forward(&mut g, model, inputs)?;
    let terms = loss_terms(g.value(trace.output).view(), target.view(), None)?;
    let grads = g.backward(trace.output, terms.grad);
    Ok((terms.total, grads.params))
}

/// Gradient check of a freshly initialized `f64` model (dropout disabled).
pub fn gradcheck(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    gradcheck_with(cfg, seed, opts, |_, _| {})
}

/// As [`gradcheck`], but `tamper(name, grad)` may alter each analytic gradient before it is
/// compared; used to confirm that corrupted gradients are caught.
pub fn gradcheck_with(
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradcheckOptions,
    tamper: impl Fn(&str, &mut Array2<f64>),
) -> Result<GradcheckReport> {
    let start = Instant::now();
    let cfg = ModelConfig {
        dropout: 0.0,
        ..cfg.clone()
    };
    let model = DualSpeakerModel::<f64>::new(cfg.clone(), seed)?;
    let (inputs, target) = random_problem(&model, opts.frames, seed);
    let (loss, mut grads) = analytic_gradients(&model, &inputs, &target)?;
    let (_, base_sig) = evaluate(&cfg, model.params(), &inputs, &target)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c0f_fee5);
    let mut work = model.params().clone();
    let mut tensors = Vec::new();
    for (id, name, value) in model.params().iter() {
        let grad = &mut grads[id.index()];
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite analytic gradient for {name}")));
        }
        tamper(name, grad);
        let n = value.len();
        let cols = value.ncols();
        let largest = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap_or(0);

        let mut check = TensorCheck {
            name: name.to_string(),
            checked: 0,
            kink_redraws: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            passed: true,
        };
        let wanted = opts.entries_per_tensor.min(n);
        let mut attempts = 0;
        while check.checked < wanted && attempts < wanted + opts.max_redraws {
            let flat = if attempts == 0 { largest } else { rng.random_range(0..n) };
            attempts += 1;
            let (r, c) = (flat / cols, flat % cols);
            let orig = value[[r, c]];
            work.get_mut(id)[[r, c]] = orig + opts.step;
            let (up, sig_up) = evaluate(&cfg, &work, &inputs, &target)?;
            work.get_mut(id)[[r, c]] = orig - opts.step;
            let (down, sig_down) = evaluate(&cfg, &work, &inputs, &target)?;
            work.get_mut(id)[[r, c]] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                check.kink_redraws += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grad[[r, c]];
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            check.max_abs_err = check.max_abs_err.max(err);
            if opts.rel_tol * scale > opts.abs_floor {
                check.max_rel_err = check.max_rel_err.max(err / scale);
            }
            if err > opts.abs_floor.max(opts.rel_tol * scale) {
                check.passed = false;
            }
            check.checked += 1;
        }
        if check.checked == 0 {
            check.passed = false;
        }
        tensors.push(check);
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradcheckReport {
        tensors,
        loss,
        passed,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
