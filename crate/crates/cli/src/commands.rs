use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use dyadic_core::config::{ModelConfig, TrainConfig};
use dyadic_core::datamodel::{read_clip, write_motion, ClipRecord, DatasetManifest, Split};
use dyadic_core::metrics::evaluate_suite;
use dyadic_core::synthgen::{generate_dataset, DatasetParams};
use dyadic_core::training::{self, gradcheck as run_gradcheck, infer_clip, Checkpoint, EpochLog, GradcheckOptions, TrainOptions};

use crate::render::{render_clip, RenderInput};
use crate::{EvalArgs, GradcheckArgs, InferArgs, Invalid, RenderArgs, SynthArgs, TrainArgs, THREADS_ENV};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Prints the resolved configuration and stores it as `dir/resolved_config.json`.
fn echo_config(dir: &Path, command: &str, config: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "threads": std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(1),
        "config": config,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    println!("resolved configuration:\n{text}");
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("--{flag}: {s:?} is not a number (expected a comma-separated list)")))
        })
        .collect()
}

fn parse_split(text: &str) -> Result<Split> {
    Ok(text.parse::<Split>()?)
}

fn read_overrides(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(json!({}));
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("config {} is not valid JSON: {e}", path.display())))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    let fractions = parse_list("splits", &a.splits)?;
    let [train, test, ood] = fractions[..] else {
        return Err(invalid(format!("--splits needs three fractions, got {}", fractions.len())));
    };
    let params = DatasetParams {
        seed: a.seed,
        n_clips: a.n_clips,
        split_fractions: [train, test, ood],
        clip_duration_s: a.duration,
        round_weights: parse_list("round-weights", &a.round_weights)?,
        noise_std: a.noise_std,
        min_span: a.min_span,
    };
    if params.n_clips == 0 {
        return Err(invalid("--n-clips must be at least 1"));
    }
    echo_config(
        &a.out_dir,
        "synth-data",
        json!({
            "seed": params.seed,
            "n_clips": params.n_clips,
            "split_fractions": params.split_fractions,
            "clip_duration_s": params.clip_duration_s,
            "round_weights": params.round_weights,
            "noise_std": params.noise_std,
            "min_span": params.min_span,
            "out_dir": a.out_dir,
        }),
    )?;
    let manifest = generate_dataset(&params, &a.out_dir)?;
    println!(
        "wrote {} clips (train {}, test {}, ood {}) to {}",
        manifest.clips.len(),
        manifest.ids(Split::Train).len(),
        manifest.ids(Split::Test).len(),
        manifest.ids(Split::Ood).len(),
        a.out_dir.join(DatasetManifest::FILE_NAME).display()
    );
    Ok(())
}

/// Preset, then config-file overrides, then flag overrides.
pub fn resolve_train_configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let model_base = ModelConfig::preset(&a.preset)?;
    let train_base = TrainConfig::preset(&a.preset)?;
    let model_cfg = ModelConfig::from_json(&model_base, &read_overrides(a.model_config.as_deref())?)?;
    let mut train_cfg = TrainConfig::from_json(&train_base, &read_overrides(a.train_config.as_deref())?)?;
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        train_cfg.learning_rate = lr;
    }
    train_cfg.validate()?;
    Ok((model_cfg, train_cfg))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_train_configs(a)?;
    let out_dir = parent_dir(&a.out);
    let log = a.log.clone().unwrap_or_else(|| out_dir.join("train_log.csv"));
    echo_config(
        &out_dir,
        "train",
        json!({
            "manifest": a.manifest,
            "model": model_cfg,
            "train": train_cfg,
            "checkpoint": a.out,
            "log": log,
        }),
    )?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let opts = TrainOptions {
        log_csv: Some(log.clone()),
        on_epoch: Some(Box::new(|e: &EpochLog| match e.val_loss {
            Some(v) => println!("epoch {:>4}  train {:.6e}  val {:.6e}  {:.1}s", e.epoch, e.train_loss, v, e.wall_time_s),
            None => println!("epoch {:>4}  train {:.6e}  {:.1}s", e.epoch, e.train_loss, e.wall_time_s),
        })),
    };
    let outcome = training::train(&manifest, &model_cfg, &train_cfg, opts)?;
    outcome.best.save(&a.out)?;
    println!(
        "saved epoch {} of {} to {} (log {})",
        outcome.best.epoch,
        outcome.last.epoch,
        a.out.display(),
        log.display()
    );
    Ok(())
}

/// Clip ids found in a directory of clip files (`<id>.meta.json`), sorted.
fn clips_in_dir(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| invalid(format!("cannot read clip directory {}: {e}", dir.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".meta.json")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(invalid(format!("no <id>.meta.json clips in {}", dir.display())));
    }
    Ok(ids)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let (source, ids, feature_root): (Box<dyn Fn(&str) -> dyadic_core::Result<ClipRecord> + Sync>, Vec<String>, Option<PathBuf>) =
        match (&a.manifest, &a.clip_dir) {
            (Some(m), _) => {
                let split = parse_split(&a.split)?;
                let manifest = DatasetManifest::load(m)?;
                let ids = manifest.ids(split).to_vec();
                let root = a.features.clone().or_else(|| Some(manifest.root().to_path_buf()));
                (Box::new(move |id: &str| manifest.load_clip(id)), ids, root)
            }
            (None, Some(dir)) => {
                let ids = match &a.clip_id {
                    Some(id) => vec![id.clone()],
                    None => clips_in_dir(dir)?,
                };
                let dir = dir.clone();
                (Box::new(move |id: &str| read_clip(&dir, id)), ids, a.features.clone())
            }
            (None, None) => unreachable!("clap requires a source"),
        };
    echo_config(
        &a.out_dir,
        "infer",
        json!({
            "checkpoint": a.checkpoint,
            "checkpoint_epoch": ckpt.epoch,
            "model": ckpt.model_cfg,
            "manifest": a.manifest,
            "split": a.manifest.as_ref().map(|_| &a.split),
            "clip_dir": a.clip_dir,
            "clips": ids.len(),
            "features": feature_root,
            "out_dir": a.out_dir,
        }),
    )?;
    if ids.is_empty() {
        return Err(invalid("no clips to predict"));
    }
    ids.par_iter()
        .map(|id| -> Result<()> {
            let clip = source(id)?;
            let pred = infer_clip(&model, &clip, &ckpt.norm_stats, feature_root.as_deref())
                .with_context(|| format!("clip {id}"))?;
            write_motion(&a.out_dir, id, &pred)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    println!("wrote {} predictions to {}", ids.len(), a.out_dir.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    echo_config(
        &a.out_dir,
        "eval",
        json!({"manifest": a.manifest, "predictions": a.predictions, "split": split, "out_dir": a.out_dir}),
    )?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = evaluate_suite(&manifest, &a.predictions, split)?;
    let files = report.save(&a.out_dir)?;
    print!("{}", report.to_csv(true));
    println!("wrote {}", files[0].display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = ModelConfig::preset(&a.preset)?;
    let opts = GradcheckOptions {
        step: a.step,
        rel_tol: a.rel_tol,
        abs_floor: a.abs_floor,
        frames: a.frames,
        ..GradcheckOptions::default()
    };
    let out_dir = a.out.as_deref().map(parent_dir).unwrap_or_else(|| PathBuf::from("."));
    let config = json!({"preset": a.preset, "seed": a.seed, "model": cfg, "options": opts});
    match &a.out {
        Some(_) => echo_config(&out_dir, "gradcheck", config)?,
        None => println!("resolved configuration:\n{}", serde_json::to_string_pretty(&config)?),
    }
    let report = run_gradcheck(&cfg, a.seed, &opts)?;
    for t in &report.tensors {
        println!(
            "{:<6} {:<28} entries {:>2}  max abs {:.2e}  max rel {:.2e}",
            if t.passed { "PASS" } else { "FAIL" },
            t.name,
            t.checked,
            t.max_abs_err,
            t.max_rel_err
        );
    }
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    let failed = report.failures().len();
    println!(
        "gradcheck {}: {} tensors, {} failed, {:.1}s",
        if report.passed { "passed" } else { "FAILED" },
        report.tensors.len(),
        failed,
        report.elapsed_s
    );
    if !report.passed {
        anyhow::bail!("{failed} parameter tensors failed the gradient check");
    }
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    echo_config(
        &a.out_dir,
        "render",
        json!({"id": a.id, "manifest": a.manifest, "clip_dir": a.clip_dir, "predictions": a.predictions, "out_dir": a.out_dir}),
    )?;
    let clip = match (&a.manifest, &a.clip_dir) {
        (Some(m), _) => Some(DatasetManifest::load(m)?.load_clip(&a.id)?),
        (None, Some(dir)) => Some(read_clip(dir, &a.id)?),
        (None, None) => None,
    };
    let pred = match &a.predictions {
        Some(dir) => Some(dyadic_core::datamodel::read_motion(dir, &a.id)?),
        None => None,
    };
    let files = render_clip(&RenderInput { id: &a.id, clip: clip.as_ref(), pred: pred.as_ref() }, &a.out_dir)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
