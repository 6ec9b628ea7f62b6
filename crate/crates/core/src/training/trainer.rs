//! Windowed mini-batch training with masked losses, per-epoch validation and best-model
//! retention. Results depend only on the seed: per-window gradients are computed in parallel
//! but summed in a fixed order.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, EpochLosses};
use super::loss::loss_terms;
use crate::autodiff::{resample_plan, Graph, Mode};
use crate::config::{AudioEncoderKind, ModelConfig, TrainConfig};
use crate::datamodel::{
    denormalize_motion, normalize_motion, BlendshapeSeq, ClipRecord, DatasetManifest, NormalizationStats, Speaker, Split,
};
use crate::error::{Error, Result};
use crate::model::{build_forward, read_features, AudioSource, DualSpeakerModel, StageInputs};
use crate::synthgen::derive_seed;

/// Sidecar stem of precomputed audio features for `feature_file` models:
/// `<root>/features/<id>.a` and `<id>.b`.
pub fn feature_stem(root: &Path, id: &str, side: Speaker) -> PathBuf {
    let tag = match side {
        Speaker::A => "a",
        Speaker::B => "b",
    };
    root.join("features").join(format!("{id}.{tag}"))
}

/// One clip ready for the model: normalized motion and audio in the encoder's input form.
/// Feature inputs are already interpolated to the motion frame count.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub id: String,
    pub audio_a: AudioSource<f32>,
    pub audio_b: AudioSource<f32>,
    pub motion_a: Array2<f32>,
    pub motion_b: Array2<f32>,
}

impl PreparedClip {
    pub fn frames(&self) -> usize {
        self.motion_a.nrows()
    }

    /// Model inputs for the whole clip.
    pub fn inputs(&self) -> StageInputs<f32> {
        StageInputs {
            audio_a: self.audio_a.clone(),
            motion_a: self.motion_a.clone(),
            audio_b: self.audio_b.clone(),
        }
    }
}

fn interpolate_rows(x: &Array2<f32>, target: usize) -> Array2<f32> {
    if x.nrows() == target {
        return x.clone();
    }
    let plan = resample_plan::<f32>(x.nrows(), target);
    let mut out = Array2::zeros((target, x.ncols()));
    for (i, &(lo, hi, t)) in plan.iter().enumerate() {
        let row = &x.row(lo) * (1.0 - t) + &x.row(hi) * t;
        out.row_mut(i).assign(&row);
    }
    out
}

/// Normalizes a clip and loads its audio in the form `cfg` consumes. `feature_root` locates
/// feature sidecars (see [`feature_stem`]) and is required for `feature_file` models.
pub fn prepare_clip(
    clip: &ClipRecord,
    cfg: &ModelConfig,
    stats: &NormalizationStats,
    feature_root: Option<&Path>,
) -> Result<PreparedClip> {
    if clip.motion_a.channels() != cfg.b {
        return Err(Error::shape(format!("clip {} channels", clip.id), cfg.b, clip.motion_a.channels()));
    }
    if (clip.fps() - cfg.fps).abs() > 1e-9 {
        return Err(Error::validation("fps", format!("clip {} is {} fps, model expects {}", clip.id, clip.fps(), cfg.fps)));
    }
    let frames = clip.frames();
    let audio = |side: Speaker| -> Result<AudioSource<f32>> {
        match cfg.audio_encoder {
            AudioEncoderKind::ToyConv => {
                let track = match side {
                    Speaker::A => &clip.audio_a,
                    Speaker::B => &clip.audio_b,
                };
                if track.sample_rate != cfg.sample_rate {
                    return Err(Error::RateMismatch {
                        path: PathBuf::from(&clip.id),
                        expected: cfg.sample_rate,
                        found: track.sample_rate,
                    });
                }
                Ok(AudioSource::Samples(track.samples.clone()))
            }
            AudioEncoderKind::FeatureFile => {
                let root = feature_root.ok_or_else(|| {
                    Error::validation("audio_encoder", "feature_file models need a feature directory")
                })?;
                let (values, meta) = read_features(&feature_stem(root, &clip.id, side))?;
                if meta.dim != cfg.d_enc {
                    return Err(Error::shape(format!("features of clip {}", clip.id), cfg.d_enc, meta.dim));
                }
                Ok(AudioSource::Features(interpolate_rows(&values, frames)))
            }
        }
    };
    Ok(PreparedClip {
        id: clip.id.clone(),
        audio_a: audio(Speaker::A)?,
        audio_b: audio(Speaker::B)?,
        motion_a: normalize_motion(&clip.motion_a, stats)?.values,
        motion_b: normalize_motion(&clip.motion_b, stats)?.values,
    })
}

/// Loads and prepares every clip of `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split, cfg: &ModelConfig) -> Result<Vec<PreparedClip>> {
    manifest
        .ids(split)
        .par_iter()
        .map(|id| {
            let clip = manifest.load_clip(id)?;
            prepare_clip(&clip, cfg, &manifest.norm_stats, Some(manifest.root()))
        })
        .collect()
}

/// A fixed-length training window; frames past `valid` are padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub clip: usize,
    pub start: usize,
    pub valid: usize,
}

/// Tiles every clip with non-overlapping windows of `len` frames. The final window of a clip
/// is padded; windows with fewer than two valid frames carry no velocity term and are dropped.
pub fn make_windows(clips: &[PreparedClip], len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        let n = clip.frames();
        let mut start = 0;
        while start < n {
            let valid = len.min(n - start);
            if valid >= 2 {
                out.push(Window { clip: c, start, valid });
            }
            start += len;
        }
    }
    out
}

fn slice_audio(src: &AudioSource<f32>, start: usize, len: usize, hop: usize) -> AudioSource<f32> {
    match src {
        AudioSource::Samples(x) => {
            let mut out = vec![0.0; len * hop];
            let from = (start * hop).min(x.len());
            let to = ((start + len) * hop).min(x.len());
            out[..to - from].copy_from_slice(&x[from..to]);
            AudioSource::Samples(out)
        }
        AudioSource::Features(h) => AudioSource::Features(pad_rows(h, start, len)),
    }
}

fn pad_rows(x: &Array2<f32>, start: usize, len: usize) -> Array2<f32> {
    let mut out = Array2::zeros((len, x.ncols()));
    let to = (start + len).min(x.nrows());
    if to > start {
        out.slice_mut(s![..to - start, ..]).assign(&x.slice(s![start..to, ..]));
    }
    out
}

/// Inputs, target and validity mask of one window.
pub fn window_batch(
    clip: &PreparedClip,
    w: Window,
    len: usize,
    hop: usize,
) -> (StageInputs<f32>, Array2<f32>, Vec<bool>) {
    let inputs = StageInputs {
        audio_a: slice_audio(&clip.audio_a, w.start, len, hop),
        motion_a: pad_rows(&clip.motion_a, w.start, len),
        audio_b: slice_audio(&clip.audio_b, w.start, len, hop),
    };
    let target = pad_rows(&clip.motion_b, w.start, len);
    let mask = (0..len).map(|i| i < w.valid).collect();
    (inputs, target, mask)
}

/// Masked loss and parameter gradients of one window.
fn window_gradient(
    model: &DualSpeakerModel<f32>,
    clip: &PreparedClip,
    w: Window,
    len: usize,
    dropout_seed: u64,
) -> Result<(f64, Vec<Array2<f32>>)> {
    let (inputs, target, mask) = window_batch(clip, w, len, model.config().hop());
    let mut g = Graph::new(model.params(), Mode::Train { seed: dropout_seed });
    let trace = build_forward(&mut g, model, &inputs)?;
    let terms = loss_terms(g.value(trace.output).view(), target.view(), Some(&mask))?;
    let grads = g.backward(trace.output, terms.grad);
    Ok((terms.total, grads.params))
}

/// Evaluation-mode `loss_total` of a whole clip.
pub fn clip_loss(model: &DualSpeakerModel<f32>, clip: &PreparedClip) -> Result<f64> {
    let pred = model.forward_inputs(&clip.inputs())?;
    Ok(loss_terms(pred.view(), clip.motion_b.view(), None)?.total)
}

/// Mean whole-clip `loss_total` over `clips`.
pub fn mean_clip_loss(model: &DualSpeakerModel<f32>, clips: &[PreparedClip]) -> Result<f64> {
    let losses = clips.par_iter().map(|c| clip_loss(model, c)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean `loss_total` on `eval` of a predictor that outputs the per-channel mean of the
/// training targets at every frame.
pub fn constant_mean_baseline(train: &[PreparedClip], eval: &[PreparedClip]) -> Result<f64> {
    let first = train.first().ok_or_else(|| Error::validation("train split", "empty"))?;
    if eval.is_empty() {
        return Err(Error::validation("evaluation split", "empty"));
    }
    let b = first.motion_b.ncols();
    let mut sum = vec![0.0f64; b];
    let mut n = 0usize;
    for clip in train {
        for row in clip.motion_b.outer_iter() {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        n += clip.frames();
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
    let mut total = 0.0;
    for clip in eval {
        let pred = Array2::from_shape_fn(clip.motion_b.dim(), |(_, c)| mean[c]);
        total += loss_terms(pred.view(), clip.motion_b.view(), None)?.total;
    }
    Ok(total / eval.len() as f64)
}

/// Denormalized prediction of Speaker B's motion for `clip`.
pub fn infer_clip(
    model: &DualSpeakerModel<f32>,
    clip: &ClipRecord,
    stats: &NormalizationStats,
    feature_root: Option<&Path>,
) -> Result<BlendshapeSeq> {
    let prepared = prepare_clip(clip, model.config(), stats, feature_root)?;
    let out = model.forward_inputs(&prepared.inputs())?;
    let seq = BlendshapeSeq::new(out, clip.fps(), model.config().layout.clone())?;
    denormalize_motion(&seq, stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Training log, rewritten from the header on every run and appended per epoch.
    pub log_csv: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss (training loss without validation).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Owns the model and optimizer state; one call to [`Trainer::step`] is one Adam update.
pub struct Trainer {
    model: DualSpeakerModel<f32>,
    opt: Adam,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let model = DualSpeakerModel::<f32>::new(model_cfg, train_cfg.seed)?;
        let opt = Adam::new(model.params(), &train_cfg);
        Ok(Self {
            model,
            opt,
            cfg: train_cfg,
        })
    }

    pub fn model(&self) -> &DualSpeakerModel<f32> {
        &self.model
    }

    pub fn steps(&self) -> i32 {
        self.opt.steps()
    }

    /// One update on the mean gradient of `batch`; returns the mean window loss. `batch_seed`
    /// drives dropout, each window drawing from its own derived stream.
    pub fn step(&mut self, clips: &[PreparedClip], batch: &[Window], batch_seed: u64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::validation("batch", "empty"));
        }
        let len = self.cfg.window_frames;
        let model = &self.model;
        let results: Vec<Result<(f64, Vec<Array2<f32>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &w)| window_gradient(model, &clips[w.clip], w, len, derive_seed(batch_seed, k as u64)))
            .collect();
        let mut total = 0.0;
        let mut sum = self.model.params().zeros_like();
        for (r, w) in results.into_iter().zip(batch) {
            let (loss, grads) = r?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient on clip {} window at frame {}",
                    clips[w.clip].id, w.start
                )));
            }
            total += loss;
            for (s, g) in sum.iter_mut().zip(&grads) {
                *s += g;
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for s in &mut sum {
            *s *= inv;
        }
        self.opt.update(self.model.params_mut(), &sum);
        Ok(total / batch.len() as f64)
    }
}

fn open_log(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "epoch,train_loss,val_loss,wall_time_s").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

/// Trains on the manifest's train split, validating on its test split.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    let train_clips = load_split(manifest, Split::Train, model_cfg)?;
    let val_clips = load_split(manifest, Split::Test, model_cfg)?;
    train_on_clips(&train_clips, &val_clips, &manifest.norm_stats, model_cfg, train_cfg, opts)
}

/// Training loop over prepared clips. `val` may be empty, in which case the best checkpoint
/// is chosen by training loss.
pub fn train_on_clips(
    train: &[PreparedClip],
    val: &[PreparedClip],
    stats: &NormalizationStats,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::validation("train split", "no training clips"));
    }
    let mut windows = make_windows(train, train_cfg.window_frames);
    if windows.is_empty() {
        return Err(Error::validation("train split", "no clip has at least 2 frames"));
    }
    let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone())?;
    let mut log_file = match &opts.log_csv {
        Some(p) => Some((open_log(p)?, p.clone())),
        None => None,
    };
    let started = Instant::now();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore<f32>)> = None;

    for epoch in 1..=train_cfg.epochs {
        let epoch_seed = derive_seed(train_cfg.seed, 1_000_000 + epoch as u64);
        windows.sort_by_key(|w| (w.clip, w.start));
        windows.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for (b, batch) in windows.chunks(train_cfg.batch_size).enumerate() {
            let batch_seed = derive_seed(epoch_seed, b as u64);
            let loss = trainer.step(train, batch, batch_seed).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / windows.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            let v = mean_clip_loss(trainer.model(), val)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}: non-finite validation loss")));
            }
            Some(v)
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = log_file.as_mut() {
            let val = entry.val_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
            writeln!(f, "{},{:.9e},{},{:.3}", epoch, train_loss, val, entry.wall_time_s)
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&entry);
        }
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, trainer.model().params().clone()));
        }
        log.push(entry);
    }

    let history: Vec<EpochLosses> = log
        .iter()
        .map(|e| EpochLosses {
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_loss: e.val_loss,
        })
        .collect();
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let checkpoint = |epoch: usize, params| Checkpoint {
        model_cfg: model_cfg.clone(),
        train_cfg: train_cfg.clone(),
        epoch,
        history: history.clone(),
        norm_stats: stats.clone(),
        params,
    };
    Ok(TrainOutcome {
        best: checkpoint(best_epoch, best_params),
        last: checkpoint(train_cfg.epochs, trainer.model.into_params()),
        log,
    })
}
