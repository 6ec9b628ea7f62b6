use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dyadic_core::config::{ModelConfig, TrainConfig};
use dyadic_core::datamodel::{read_clip, write_clip, write_motion, DatasetManifest, Split};
use dyadic_core::metrics::evaluate_suite;
use dyadic_core::model::DualSpeakerModel;
use dyadic_core::synthgen::{generate_clip, generate_dataset, DatasetParams, GenParams};
use dyadic_core::training::{infer_clip, train, Checkpoint, TrainOptions};
use dyadic_core::Error;

fn small_dataset(dir: &Path, seed: u64, n: usize) -> DatasetManifest {
    let p = DatasetParams {
        seed,
        n_clips: n,
        clip_duration_s: 4.0,
        round_weights: vec![1.0],
        ..DatasetParams::default()
    };
    generate_dataset(&p, dir).unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_generation_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_dataset(a.path(), 7, 5);
    small_dataset(b.path(), 7, 5);
    let ta = tree_bytes(a.path());
    assert_eq!(ta.len(), 1 + 5 * 5);
    assert_eq!(ta, tree_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    small_dataset(c.path(), 8, 5);
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn clip_round_trip_is_byte_exact() {
    let p = GenParams {
        seed: 21,
        duration_s: 6.0,
        target_rounds: 2,
        noise_std: 0.005,
        ..GenParams::default()
    };
    let clip = generate_clip("rt", &p).unwrap();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    write_clip(&clip, first.path()).unwrap();
    let back = read_clip(first.path(), "rt").unwrap();
    assert_eq!(back, clip);
    write_clip(&back, second.path()).unwrap();
    assert_eq!(tree_bytes(first.path()), tree_bytes(second.path()));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 3, 4);
    let tcfg = TrainConfig {
        epochs: 2,
        window_frames: 50,
        batch_size: 2,
        learning_rate: 1e-3,
        ..TrainConfig::toy()
    };
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::toy()
    };
    let out = train(&manifest, &cfg, &tcfg, TrainOptions::default()).unwrap();
    let path = dir.path().join("m.ckpt");
    out.best.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.best);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.history.len(), 2);

    // the restored model predicts exactly what the trained one does
    let clip = manifest.load_clip(&manifest.ids(Split::Test)[0]).unwrap();
    let a = infer_clip(&out.best.model().unwrap(), &clip, &manifest.norm_stats, None).unwrap();
    let b = infer_clip(&back.model().unwrap(), &clip, &back.norm_stats, None).unwrap();
    assert_eq!(a, b);

    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 1;
    corrupt[last] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Integrity(_))));
}

#[test]
fn evaluation_names_missing_predictions_and_scores_ground_truth_as_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 9, 10);
    let preds = dir.path().join("pred");
    let ids = manifest.ids(Split::Test).to_vec();
    assert!(!ids.is_empty());
    match evaluate_suite(&manifest, &preds, Split::Test) {
        Err(Error::Coverage(missing)) => assert_eq!(missing, ids),
        other => panic!("expected a coverage error, got {other:?}"),
    }
    for id in &ids {
        write_motion(&preds, id, &manifest.load_clip(id).unwrap().motion_b).unwrap();
    }
    let report = evaluate_suite(&manifest, &preds, Split::Test).unwrap();
    for p in [&report.exp, &report.jaw, &report.pose] {
        assert!(p.fd.abs() <= 1e-8 && p.mse == 0.0 && p.rpcc.abs() <= 1e-8, "{p:?}");
        assert!((p.p_fd).abs() <= 1e-8);
    }
}

/// Output frames up to `t` must not see Speaker-B audio after frame `t`. The conv encoder's
/// receptive field is its own frame window, so the margin is zero frames.
#[test]
fn outputs_are_causal_in_speaker_b_audio() {
    for window in [None, Some(8)] {
        let cfg = ModelConfig {
            mask_window: window,
            ..ModelConfig::toy()
        };
        let hop = cfg.hop();
        let p = GenParams {
            seed: 5,
            duration_s: 4.0,
            target_rounds: 2,
            ..GenParams::default()
        };
        let clip = generate_clip("c", &p).unwrap();
        let frames = clip.frames();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for draw in 0..10u64 {
            let model = DualSpeakerModel::<f32>::new(cfg.clone(), 1000 + draw).unwrap();
            let t = rng.random_range(0..frames - 1);
            let mut audio_b = clip.audio_b.clone();
            for s in audio_b.samples.iter_mut().skip((t + 1) * hop) {
                *s = rng.random_range(-0.5..0.5);
            }
            let base = model.forward(&clip.audio_a, &clip.motion_a, &clip.audio_b).unwrap();
            let moved = model.forward(&clip.audio_a, &clip.motion_a, &audio_b).unwrap();
            let past = (0..=t)
                .flat_map(|f| (0..56).map(move |c| (f, c)))
                .map(|(f, c)| (base.values[[f, c]] - moved.values[[f, c]]).abs())
                .fold(0.0f32, f32::max);
            assert!(past <= 1e-6, "window {window:?} draw {draw}: frames <= {t} moved by {past}");
            let future = (t + 1..frames)
                .flat_map(|f| (0..56).map(move |c| (f, c)))
                .map(|(f, c)| (base.values[[f, c]] - moved.values[[f, c]]).abs())
                .fold(0.0f32, f32::max);
            assert!(future > 0.0, "perturbation had no effect at all");
        }
    }
}
