use ndarray::Array2;

use super::*;
use crate::config::{ModVariant, ModelConfig, OutputActivation, TrainConfig};
use crate::datamodel::{BlendshapeSeq, NormalizationStats};
use crate::error::Error;
use crate::model::DualSpeakerModel;
use crate::synthgen::{generate_clip, GenParams};

fn tiny_clips(n: usize, seconds: f64) -> (Vec<PreparedClip>, NormalizationStats) {
    let cfg = ModelConfig::tiny();
    let clips: Vec<_> = (0..n)
        .map(|i| {
            let p = GenParams {
                seed: 40 + i as u64,
                duration_s: seconds,
                target_rounds: 1,
                sample_rate: cfg.sample_rate,
                ..GenParams::default()
            };
            generate_clip(&format!("c{i}"), &p).unwrap()
        })
        .collect();
    let stats = NormalizationStats::fit(clips.iter().map(|c| &c.motion_b), 0.1).unwrap();
    let prepared = clips.iter().map(|c| prepare_clip(c, &cfg, &stats, None).unwrap()).collect();
    (prepared, stats)
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 3,
        batch_size: 2,
        window_frames: 20,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn gradcheck_passes_for_every_tensor() {
    for cfg in [
        ModelConfig::tiny(),
        ModelConfig {
            mod_variant: ModVariant::Mlp,
            output_activation: OutputActivation::Linear,
            mask_window: Some(3),
            ..ModelConfig::tiny()
        },
    ] {
        let report = gradcheck(&cfg, 11, &GradcheckOptions::default()).unwrap();
        let model = DualSpeakerModel::<f64>::new(cfg, 0).unwrap();
        assert_eq!(report.tensors.len(), model.params().len());
        for t in &report.tensors {
            assert!(t.passed, "{}: abs {:.3e} rel {:.3e}", t.name, t.max_abs_err, t.max_rel_err);
            assert!(t.checked >= 1);
        }
        assert!(report.passed);
    }
}

#[test]
fn gradcheck_detects_a_corrupted_gradient() {
    let report = gradcheck_with(&ModelConfig::tiny(), 12, &GradcheckOptions::default(), |name, g| {
        if name == "dec0.ff1.w" {
            g.mapv_inplace(|v| v * 1.01 + 1e-4);
        }
    })
    .unwrap();
    assert!(!report.passed);
    let failures: Vec<&str> = report.failures().iter().map(|t| t.name.as_str()).collect();
    assert_eq!(failures, ["dec0.ff1.w"]);
}

#[test]
fn zero_alpha_detaches_the_modulation_weights() {
    let cfg = ModelConfig {
        alpha: 0.0,
        ..ModelConfig::tiny()
    };
    let model = DualSpeakerModel::<f64>::new(cfg, 13).unwrap();
    let (inputs, target) = random_problem(&model, 12, 13);
    let (_, grads) = analytic_gradients(&model, &inputs, &target).unwrap();
    for name in ["mod.w_m.w", "mod.w_m.b"] {
        let g = &grads[model.param_id(name).unwrap().index()];
        assert!(g.iter().all(|&v| v == 0.0), "{name}");
    }
    let head = &grads[model.param_id("head.w_o.w").unwrap().index()];
    assert!(head.iter().any(|&v| v != 0.0));
}

#[test]
fn windows_tile_clips_with_padding() {
    let (clips, _) = tiny_clips(2, 4.0);
    assert_eq!(clips[0].frames(), 100);
    let w = make_windows(&clips, 30);
    assert_eq!(w.len(), 8);
    assert_eq!(w[3], Window { clip: 0, start: 90, valid: 10 });
    let (inputs, target, mask) = window_batch(&clips[0], w[3], 30, 16);
    assert_eq!(target.nrows(), 30);
    assert_eq!(inputs.motion_a.nrows(), 30);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 10);
    assert!(target.slice(ndarray::s![10.., ..]).iter().all(|&v| v == 0.0));
    match inputs.audio_b {
        crate::model::AudioSource::Samples(s) => assert_eq!(s.len(), 30 * 16),
        _ => panic!("expected samples"),
    }
    // a final window holding a single frame carries no velocity pair and is dropped
    assert_eq!(make_windows(&clips[..1], 99).len(), 1);
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let (clips, stats) = tiny_clips(3, 2.0);
    let cfg = ModelConfig {
        dropout: 0.1,
        ..ModelConfig::tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.csv");
    let mut seen = Vec::new();
    let run = |opts: TrainOptions<'_>| train_on_clips(&clips[..2], &clips[2..], &stats, &cfg, &tiny_train_cfg(), opts).unwrap();
    let first = run(TrainOptions {
        log_csv: Some(log.clone()),
        on_epoch: Some(Box::new(|e: &EpochLog| seen.push(e.epoch))),
    });
    let second = run(TrainOptions::default());
    assert_eq!(seen, [1, 2, 3]);
    assert_eq!(first.log.len(), 3);
    assert_eq!(first.best.history.len(), 3);
    assert!(first.log.iter().all(|e| e.val_loss.is_some()));
    assert_eq!(first.last.params, second.last.params);
    assert_eq!(first.best.to_bytes(), second.best.to_bytes());
    let best_val = first.log.iter().map(|e| e.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(first.log[first.best.epoch - 1].val_loss, Some(best_val));

    let csv = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,wall_time_s");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));

    let other = train_on_clips(
        &clips[..2],
        &[],
        &stats,
        &cfg,
        &TrainConfig { seed: 6, ..tiny_train_cfg() },
        TrainOptions::default(),
    )
    .unwrap();
    assert!(other.log.iter().all(|e| e.val_loss.is_none()));
    assert_ne!(other.last.params, first.last.params);
}

#[test]
fn training_reduces_loss_on_a_single_clip() {
    let (clips, stats) = tiny_clips(1, 2.0);
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 1,
        window_frames: 50,
        learning_rate: 1e-2,
        ..tiny_train_cfg()
    };
    let out = train_on_clips(&clips, &[], &stats, &ModelConfig::tiny(), &cfg, TrainOptions::default()).unwrap();
    let first = out.log[0].train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn training_rejects_empty_inputs() {
    let (clips, stats) = tiny_clips(1, 2.0);
    let cfg = ModelConfig::tiny();
    let err = train_on_clips(&[], &clips, &stats, &cfg, &tiny_train_cfg(), TrainOptions::default()).unwrap_err();
    assert!(err.is_validation());
    let bad = TrainConfig { epochs: 0, ..tiny_train_cfg() };
    assert!(train_on_clips(&clips, &[], &stats, &cfg, &bad, TrainOptions::default()).is_err());
}

#[test]
fn non_finite_loss_aborts_with_a_named_batch() {
    let (mut clips, stats) = tiny_clips(2, 2.0);
    clips[1].motion_b[[5, 3]] = f32::NAN;
    let err = train_on_clips(&clips, &[], &stats, &ModelConfig::tiny(), &tiny_train_cfg(), TrainOptions::default())
        .unwrap_err();
    match err {
        Error::Numerical(msg) => {
            assert!(msg.contains("epoch 1, batch"), "{msg}");
            assert!(msg.contains("clip c1"), "{msg}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn baseline_matches_a_hand_computed_constant_predictor() {
    let (clips, _) = tiny_clips(3, 2.0);
    let base = constant_mean_baseline(&clips[..2], &clips[2..]).unwrap();
    let mut mean = Array2::<f64>::zeros((1, 56));
    let mut n = 0.0;
    for c in &clips[..2] {
        for row in c.motion_b.outer_iter() {
            for (k, &v) in row.iter().enumerate() {
                mean[[0, k]] += v as f64;
            }
            n += 1.0;
        }
    }
    mean /= n;
    let gt = &clips[2].motion_b;
    let pred = Array2::from_shape_fn(gt.dim(), |(_, k)| mean[[0, k]] as f32);
    let seq = |v: &Array2<f32>| BlendshapeSeq::flame(v.clone(), 25.0).unwrap();
    let expect = loss_total(&seq(&pred), &seq(gt)).unwrap();
    assert!((base - expect).abs() < 1e-9);
    assert!(constant_mean_baseline(&[], &clips).is_err());
}

#[test]
fn inference_returns_raw_space_motion() {
    let cfg = ModelConfig::tiny();
    let p = GenParams {
        seed: 3,
        duration_s: 2.0,
        target_rounds: 1,
        sample_rate: cfg.sample_rate,
        ..GenParams::default()
    };
    let clip = generate_clip("x", &p).unwrap();
    let stats = NormalizationStats::new(vec![-2.0; 56], vec![2.0; 56]).unwrap();
    let model = DualSpeakerModel::<f32>::new(cfg, 3).unwrap();
    let out = infer_clip(&model, &clip, &stats, None).unwrap();
    assert_eq!(out.frames(), clip.frames());
    assert!(out.values.iter().all(|&v| v > -2.0 && v < 2.0));
    let prepared = prepare_clip(&clip, model.config(), &stats, None).unwrap();
    let normalized = model.forward_inputs(&prepared.inputs()).unwrap();
    assert!((out.values[[0, 0]] - (normalized[[0, 0]] * 4.0 - 2.0)).abs() < 1e-6);
}
