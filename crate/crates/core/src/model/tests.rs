use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{AttnMask, Mode};
use crate::config::{DecoderInput, ModVariant, OutputActivation};
use crate::datamodel::{AudioTrack, BlendshapeSeq, Speaker};

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn tiny(seed: u64) -> DualSpeakerModel<f64> {
    DualSpeakerModel::new(ModelConfig::tiny(), seed).unwrap()
}

fn set(model: &mut DualSpeakerModel<f64>, name: &str, f: impl Fn(&mut Array2<f64>)) {
    let id = model.param_id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    f(model.params_mut().get_mut(id));
}

fn seq(values: Array2<f64>, stage: Stage) -> FeatureSeq<f64> {
    FeatureSeq::new(values, stage).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn noise_track(rng: &mut ChaCha8Rng, seconds: f64, sr: u32) -> AudioTrack {
    let n = (seconds * sr as f64).round() as usize;
    AudioTrack::new((0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(), sr).unwrap()
}

#[test]
fn audio_rows_match_motion_frames() {
    let model = DualSpeakerModel::<f32>::new(ModelConfig::toy(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let track = noise_track(&mut rng, 10.0, 16_000);
    let h = model.encode_audio(&track, Speaker::A).unwrap();
    assert_eq!((h.len(), h.dim()), (250, 64));
    assert_eq!(h.stage, Stage::HA);
    assert!(h.values.iter().all(|v| v.is_finite()));

    // partial final window: 10.75 frames of audio still yields round(duration · fps) rows
    let odd = noise_track(&mut rng, 0.43, 16_000);
    assert_eq!(model.encode_audio(&odd, Speaker::B).unwrap().len(), 11);

    let short = AudioTrack::new(vec![0.1; 100], 16_000).unwrap();
    assert!(model.encode_audio(&short, Speaker::A).is_err());
}

#[test]
fn full_preset_audio_width() {
    let model = DualSpeakerModel::<f32>::new(ModelConfig::full(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = model.encode_audio(&noise_track(&mut rng, 1.0, 16_000), Speaker::A).unwrap();
    assert_eq!((h.len(), h.dim()), (25, 1024));
    let blend = model.param_id("blend.l1.w").unwrap();
    assert_eq!(model.params().get(blend).dim(), (56, 128));
    assert_eq!(ModelConfig::full().head_dim(), 64);
}

#[test]
fn silent_audio_gives_zero_features() {
    let model = tiny(3);
    let track = AudioTrack::new(vec![0.0; 16 * 6], 400).unwrap();
    let h = model.encode_audio(&track, Speaker::B).unwrap();
    assert_eq!(h.len(), 6);
    assert!(h.values.iter().all(|&v| v == 0.0));
}

#[test]
fn speaker_encoders_are_independent() {
    let mut model = tiny(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let track = noise_track(&mut rng, 0.4, 400);
    let before_b = model.encode_audio(&track, Speaker::B).unwrap();
    let before_a = model.encode_audio(&track, Speaker::A).unwrap();
    assert_ne!(before_a.values, before_b.values);
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("audio_a."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    assert!(!names.is_empty());
    for name in &names {
        set(&mut model, name, |w| w.mapv_inplace(|v| v * 1.7 + 0.05));
    }
    assert_eq!(model.encode_audio(&track, Speaker::B).unwrap(), before_b);
    assert_ne!(model.encode_audio(&track, Speaker::A).unwrap(), before_a);
}

#[test]
fn projection_is_shared_linear_and_local() {
    let model = tiny(5);
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h1 = rand_mat(&mut rng, 7, cfg.d_enc, -1.0, 1.0);
    let h2 = rand_mat(&mut rng, 7, cfg.d_enc, -1.0, 1.0);
    let z1 = model.project_audio(&seq(h1.clone(), Stage::HA)).unwrap();
    let z2 = model.project_audio(&seq(h2.clone(), Stage::HA)).unwrap();
    assert_eq!(z1.stage, Stage::ZA);
    let zb = model.project_audio(&seq(h1.clone(), Stage::HB)).unwrap();
    assert_eq!(zb.stage, Stage::ZB);
    assert_eq!(zb.values, z1.values);

    let (a, b) = (0.7, -1.3);
    let mix = model.project_audio(&seq(&h1 * a + &h2 * b, Stage::HA)).unwrap();
    let expect = &z1.values * a + &z2.values * b;
    for (x, y) in mix.values.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-3));
    }

    // naive per-row matrix-vector product
    let w_a = model.params().get(model.param_id("proj.w_a").unwrap());
    for n in 0..7 {
        for i in 0..cfg.d {
            let mut acc = 0.0;
            for j in 0..cfg.d_enc {
                acc += w_a[[i, j]] * h1[[n, j]];
            }
            assert!((acc - z1.values[[n, i]]).abs() < 1e-12);
        }
    }
    assert!(model.project_audio(&seq(Array2::zeros((3, cfg.d)), Stage::FPrime)).is_err());
}

#[test]
fn projection_special_cases() {
    let cfg = ModelConfig {
        d_enc: 16,
        ..ModelConfig::tiny()
    };
    let mut model = DualSpeakerModel::<f64>::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = seq(rand_mat(&mut rng, 5, 16, -1.0, 1.0), Stage::HA);
    set(&mut model, "proj.w_a", |w| w.assign(&Array2::eye(16)));
    assert_eq!(model.project_audio(&h).unwrap().values, h.values);
    set(&mut model, "proj.w_a", |w| w.fill(0.0));
    assert!(model.project_audio(&h).unwrap().values.iter().all(|&v| v == 0.0));
}

#[test]
fn blendshape_encoder_is_nonnegative() {
    let mut model = tiny(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let m = rand_mat(&mut rng, 9, 56, -3.0, 3.0);
        let out = model.encode_blendshapes(&m).unwrap();
        assert_eq!((out.len(), out.dim(), out.stage), (9, 16, Stage::MAPrime));
        assert!(out.values.iter().all(|&v| v >= 0.0));
    }
    assert!(model.encode_blendshapes(&Array2::zeros((4, 55))).is_err());
    for name in ["blend.l1.w", "blend.l1.b", "blend.l2.w", "blend.l2.b"] {
        set(&mut model, name, |w| w.fill(0.0));
    }
    let out = model.encode_blendshapes(&rand_mat(&mut rng, 3, 56, 0.0, 1.0)).unwrap();
    assert!(out.values.iter().all(|&v| v == 0.0));
}

fn value_proj(model: &DualSpeakerModel<f64>, m_prime: &Array2<f64>) -> Array2<f64> {
    m_prime.dot(model.params().get(model.param_id("xattn.wv").unwrap()))
}

#[test]
fn cross_attention_single_frame_and_identical_keys() {
    let model = tiny(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = seq(rand_mat(&mut rng, 1, 16, -1.0, 1.0), Stage::ZA);
    let m = seq(rand_mat(&mut rng, 1, 16, 0.0, 1.0), Stage::MAPrime);
    let (c, weights) = model.cross_attend_with_weights(&z, &m).unwrap();
    assert_eq!(weights.len(), 2);
    assert!(weights.iter().all(|w| w[[0, 0]] == 1.0));
    assert!(max_abs_diff(&c.values, &value_proj(&model, &m.values)) < 1e-15);

    let row = rand_mat(&mut rng, 1, 16, 0.0, 1.0);
    let same = seq(row.broadcast((6, 16)).unwrap().to_owned(), Stage::MAPrime);
    let z = seq(rand_mat(&mut rng, 6, 16, -1.0, 1.0), Stage::ZA);
    let c = model.cross_attend(&z, &same).unwrap();
    let v = value_proj(&model, &row);
    for r in c.values.outer_iter() {
        for (x, y) in r.iter().zip(v.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let short = seq(rand_mat(&mut rng, 5, 16, 0.0, 1.0), Stage::MAPrime);
    assert!(model.cross_attend(&z, &short).is_err());
}

#[test]
fn attention_rows_are_probability_vectors() {
    let model = tiny(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = seq(rand_mat(&mut rng, 12, 16, -2.0, 2.0), Stage::ZA);
    let m = seq(rand_mat(&mut rng, 12, 16, 0.0, 2.0), Stage::MAPrime);
    let (_, weights) = model.cross_attend_with_weights(&z, &m).unwrap();
    let f = seq(rand_mat(&mut rng, 12, 16, -2.0, 2.0), Stage::FPrime);
    let (_, align) = model.modal_align_with_weights(&f).unwrap();
    for w in weights.iter().chain(&align) {
        assert!(w.iter().all(|&p| p >= 0.0));
        for s in w.sum_axis(Axis(1)) {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn duplicating_keys_and_values_leaves_attention_output_unchanged() {
    let model = tiny(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = rand_mat(&mut rng, 5, 16, -1.0, 1.0);
    let kv = rand_mat(&mut rng, 7, 16, -1.0, 1.0);
    let doubled = ndarray::concatenate(Axis(0), &[kv.view(), kv.view()]).unwrap();
    let run = |kv: &Array2<f64>| {
        let mut g = Graph::new(model.params(), Mode::Eval);
        let qv = g.input(q.clone());
        let kvv = g.input(kv.clone());
        let out = model.layout.xattn.apply(&mut g, qv, kvv, AttnMask::None, &mut Vec::new());
        g.value(out).clone()
    };
    assert!(max_abs_diff(&run(&kv), &run(&doubled)) < 1e-12);
}

#[test]
fn temporal_enhancer_is_bidirectional_and_deterministic() {
    let model = tiny(11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = rand_mat(&mut rng, 10, 16, -1.0, 1.0);
    let t = model.temporal_enhance(&seq(c.clone(), Stage::C)).unwrap();
    assert_eq!((t.len(), t.dim(), t.stage), (10, 16, Stage::T));
    assert_eq!(model.temporal_enhance(&seq(c.clone(), Stage::C)).unwrap(), t);

    let mut late = c.clone();
    late.row_mut(9).mapv_inplace(|v| v + 0.5);
    let t2 = model.temporal_enhance(&seq(late, Stage::C)).unwrap();
    let first = (&t2.values.row(0) - &t.values.row(0)).mapv(f64::abs).sum();
    assert!(first > 0.0, "last frame must reach the first through the backward direction");

    // a single frame sees only itself
    let one = model.temporal_enhance(&seq(c.slice(s![..1, ..]).to_owned(), Stage::C)).unwrap();
    assert_eq!(one.len(), 1);

    let zero = model.temporal_enhance(&seq(Array2::zeros((4, 16)), Stage::C)).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
}

#[test]
fn fusion_concatenates_exactly() {
    let model = tiny(12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = rand_mat(&mut rng, 6, 16, -1.0, 1.0);
    let t = rand_mat(&mut rng, 6, 16, -1.0, 1.0);
    let i = model.fuse_features(&seq(z.clone(), Stage::ZA), &seq(t.clone(), Stage::T)).unwrap();
    assert_eq!((i.dim(), i.stage), (32, Stage::I));
    assert_eq!(i.values.slice(s![.., ..16]), z);
    assert_eq!(i.values.slice(s![.., 16..]), t);
    let short = seq(rand_mat(&mut rng, 5, 16, -1.0, 1.0), Stage::T);
    assert!(model.fuse_features(&seq(z, Stage::ZA), &short).is_err());
    assert_eq!(Stage::I.width(&ModelConfig::full()), 512);
}

#[test]
fn interaction_encoder_shape_and_determinism() {
    let model = tiny(13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let i = seq(rand_mat(&mut rng, 8, 32, -1.0, 1.0), Stage::I);
    let f = model.encode_interaction(&i).unwrap();
    assert_eq!((f.len(), f.dim(), f.stage), (8, 16, Stage::FPrime));
    assert_eq!(model.encode_interaction(&i).unwrap(), f);
    assert!(model.encode_interaction(&seq(rand_mat(&mut rng, 8, 16, 0.0, 1.0), Stage::I)).is_err());
}

#[test]
fn modal_alignment_is_causal() {
    let len = 12;
    for draw in 0..10u64 {
        let cfg = ModelConfig {
            mask_window: if draw % 2 == 0 { None } else { Some(3) },
            ..ModelConfig::tiny()
        };
        let model = DualSpeakerModel::<f64>::new(cfg, 100 + draw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let f = rand_mat(&mut rng, len, 16, -1.0, 1.0);
        let t = rng.random_range(0..len - 1);
        let mut g = f.clone();
        for r in t + 1..len {
            for c in 0..16 {
                g[[r, c]] += rng.random_range(-1.0..1.0);
            }
        }
        let a = model.modal_align(&seq(f, Stage::FPrime)).unwrap();
        let b = model.modal_align(&seq(g, Stage::FPrime)).unwrap();
        assert_eq!(a.stage, Stage::FDPrime);
        let past = max_abs_diff(
            &a.values.slice(s![..=t, ..]).to_owned(),
            &b.values.slice(s![..=t, ..]).to_owned(),
        );
        assert!(past <= 1e-6, "draw {draw}: frame <= {t} moved by {past}");
        assert!(max_abs_diff(&a.values, &b.values) > 0.0);
    }
}

#[test]
fn unit_window_attends_only_to_itself() {
    let cfg = ModelConfig {
        mask_window: Some(1),
        ..ModelConfig::tiny()
    };
    let model = DualSpeakerModel::<f64>::new(cfg, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (_, weights) = model
        .modal_align_with_weights(&seq(rand_mat(&mut rng, 6, 16, -1.0, 1.0), Stage::FPrime))
        .unwrap();
    for w in &weights {
        assert_eq!(w, &Array2::<f64>::eye(6));
    }
    let (_, single) = tiny(15)
        .modal_align_with_weights(&seq(rand_mat(&mut rng, 1, 16, -1.0, 1.0), Stage::FPrime))
        .unwrap();
    assert!(single.iter().all(|w| w[[0, 0]] == 1.0));
    let bad = ModelConfig {
        mask_window: Some(0),
        ..ModelConfig::tiny()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn decoder_is_causal_in_speaker_b_audio() {
    let len = 10;
    for draw in 0..10u64 {
        let model = tiny(300 + draw);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + draw);
        let z = rand_mat(&mut rng, len, 16, -1.0, 1.0);
        let f = seq(rand_mat(&mut rng, len, 16, -1.0, 1.0), Stage::FDPrime);
        let t = rng.random_range(0..len - 1);
        let mut z2 = z.clone();
        for r in t + 1..len {
            for c in 0..16 {
                z2[[r, c]] += rng.random_range(-1.0..1.0);
            }
        }
        let a = model.decode_interaction(&seq(z, Stage::ZB), &f).unwrap();
        let b = model.decode_interaction(&seq(z2, Stage::ZB), &f).unwrap();
        assert_eq!((a.len(), a.dim(), a.stage), (len, 16, Stage::D));
        let past = max_abs_diff(
            &a.values.slice(s![..=t, ..]).to_owned(),
            &b.values.slice(s![..=t, ..]).to_owned(),
        );
        assert!(past <= 1e-6, "draw {draw}: frame <= {t} moved by {past}");
    }
    let model = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = seq(rand_mat(&mut rng, 4, 16, -1.0, 1.0), Stage::ZB);
    let f = seq(rand_mat(&mut rng, 5, 16, -1.0, 1.0), Stage::FDPrime);
    assert!(model.decode_interaction(&z, &f).is_err());
}

#[test]
fn decoder_without_audio_ignores_z_b() {
    let cfg = ModelConfig {
        decoder_input: DecoderInput::Zeros,
        ..ModelConfig::tiny()
    };
    let model = DualSpeakerModel::<f64>::new(cfg, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let f = seq(rand_mat(&mut rng, 5, 16, -1.0, 1.0), Stage::FDPrime);
    let a = model.decode_interaction(&seq(rand_mat(&mut rng, 5, 16, -1.0, 1.0), Stage::ZB), &f).unwrap();
    let b = model.decode_interaction(&seq(rand_mat(&mut rng, 5, 16, -1.0, 1.0), Stage::ZB), &f).unwrap();
    assert_eq!(a, b);
}

#[test]
fn modulation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let d = seq(rand_mat(&mut rng, 7, 16, -1.0, 1.0), Stage::D);

    let off = DualSpeakerModel::<f64>::new(ModelConfig { alpha: 0.0, ..ModelConfig::tiny() }, 17).unwrap();
    let out = off.modulate_expression(&d).unwrap();
    assert_eq!((out.stage, &out.values), (Stage::DPrime, &d.values));

    let mut model = tiny(17);
    for _ in 0..10 {
        let d = seq(rand_mat(&mut rng, 7, 16, -2.0, 2.0), Stage::D);
        let out = model.modulate_expression(&d).unwrap();
        assert!(out.values.iter().zip(&d.values).all(|(o, i)| o - i >= 0.0));
    }
    set(&mut model, "mod.w_m.w", |w| w.fill(0.0));
    set(&mut model, "mod.w_m.b", |w| w.fill(0.0));
    assert_eq!(model.modulate_expression(&d).unwrap().values, d.values);

    let mlp = DualSpeakerModel::<f64>::new(
        ModelConfig {
            mod_variant: ModVariant::Mlp,
            ..ModelConfig::tiny()
        },
        18,
    )
    .unwrap();
    assert_eq!(mlp.params().get(mlp.param_id("mod.l1.w").unwrap()).dim(), (16, 32));
    let out = mlp.modulate_expression(&d).unwrap();
    assert_eq!(out.values.dim(), (7, 16));
    assert_ne!(out.values, d.values);
}

#[test]
fn head_activation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let d = seq(rand_mat(&mut rng, 4, 16, -1.0, 1.0), Stage::DPrime);
    let mut model = tiny(19);
    let out = model.predict_blendshapes(&d).unwrap();
    assert_eq!(out.dim(), (4, 56));
    assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    set(&mut model, "head.w_o.w", |w| w.fill(0.0));
    set(&mut model, "head.w_o.b", |w| w.fill(0.0));
    assert!(model.predict_blendshapes(&d).unwrap().iter().all(|&v| v == 0.5));

    let mut linear = DualSpeakerModel::<f64>::new(
        ModelConfig {
            output_activation: OutputActivation::Linear,
            ..ModelConfig::tiny()
        },
        20,
    )
    .unwrap();
    set(&mut linear, "head.w_o.w", |w| w.fill(0.0));
    set(&mut linear, "head.w_o.b", |w| {
        for (k, v) in w.iter_mut().enumerate() {
            *v = k as f64 * 0.25 - 3.0;
        }
    });
    let out = linear.predict_blendshapes(&d).unwrap();
    for row in out.outer_iter() {
        for (k, &v) in row.iter().enumerate() {
            assert_eq!(v, k as f64 * 0.25 - 3.0);
        }
    }
}

fn motion(rng: &mut ChaCha8Rng, frames: usize) -> BlendshapeSeq {
    let v = Array2::from_shape_simple_fn((frames, 56), || rng.random_range(0.0f32..1.0));
    BlendshapeSeq::flame(v, 25.0).unwrap()
}

#[test]
fn forward_preserves_frame_count_and_is_deterministic() {
    let model = DualSpeakerModel::<f32>::new(ModelConfig::toy(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seconds in [1.0, 4.0, 10.0] {
        let frames = (seconds * 25.0) as usize;
        let a = noise_track(&mut rng, seconds, 16_000);
        let b = noise_track(&mut rng, seconds, 16_000);
        let m = motion(&mut rng, frames);
        let out = model.forward(&a, &m, &b).unwrap();
        assert_eq!(out.frames(), frames);
        assert!(out.values.iter().all(|&v| v > 0.0 && v < 1.0));
        if seconds == 4.0 {
            assert_eq!(model.forward(&a, &m, &b).unwrap(), out);
        }
    }
    let a = noise_track(&mut rng, 2.0, 16_000);
    let b = noise_track(&mut rng, 1.0, 16_000);
    assert!(model.forward(&a, &motion(&mut rng, 50), &b).is_err());
    let wrong_rate = noise_track(&mut rng, 2.0, 8_000);
    assert!(model.forward(&a, &motion(&mut rng, 50), &wrong_rate).is_err());
}

#[test]
fn every_stage_is_finite_with_documented_widths() {
    for (cfg, seed) in [(ModelConfig::tiny(), 22u64), (ModelConfig::toy(), 23)] {
        let model = DualSpeakerModel::<f32>::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 30;
        let samples = |rng: &mut ChaCha8Rng| {
            AudioSource::Samples((0..frames * cfg.hop()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        };
        let inputs = StageInputs {
            audio_a: samples(&mut rng),
            motion_a: Array2::from_shape_simple_fn((frames, cfg.b), || rng.random_range(0.0f32..1.0)),
            audio_b: samples(&mut rng),
        };
        let (stages, out) = model.forward_stages(&inputs).unwrap();
        assert_eq!(stages.len(), Stage::ALL.len());
        for (s, expected) in stages.iter().zip(Stage::ALL) {
            assert_eq!(s.stage, expected);
            assert_eq!((s.len(), s.dim()), (frames, expected.width(&cfg)), "{expected}");
            assert!(s.values.iter().all(|v| v.is_finite()), "{expected}");
        }
        assert!(out.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn precision_cast_agrees() {
    let model = DualSpeakerModel::<f32>::new(ModelConfig::tiny(), 24).unwrap();
    let wide = model.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let m = Array2::from_shape_simple_fn((8, 56), || rng.random_range(0.0f64..1.0));
    let narrow = model.encode_blendshapes(&m.mapv(|v| v as f32)).unwrap();
    let wide_out = wide.encode_blendshapes(&m).unwrap();
    for (a, b) in narrow.values.iter().zip(&wide_out.values) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
    assert!(DualSpeakerModel::<f32>::from_params(ModelConfig::toy(), model.params().clone()).is_err());
}

#[test]
fn feature_files_round_trip_and_drive_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let h = Array2::from_shape_simple_fn((13, 8), || rng.random_range(-1.0f32..1.0));
    let stem = dir.path().join("clip.a");
    write_features(&stem, &h, "unit-test").unwrap();
    let (back, meta) = read_features(&stem).unwrap();
    assert_eq!(back, h);
    assert_eq!((meta.frames, meta.dim, meta.source.as_str()), (13, 8, "unit-test"));

    let cfg = ModelConfig {
        audio_encoder: AudioEncoderKind::FeatureFile,
        ..ModelConfig::tiny()
    };
    let model = DualSpeakerModel::<f32>::new(cfg, 25).unwrap();
    let m = motion(&mut rng, 20);
    let out = model.forward_features(&back, &m, &back).unwrap();
    assert_eq!(out.frames(), 20);
    assert!(model.forward_features(&Array2::zeros((13, 7)), &m, &back).is_err());
}

#[test]
fn feature_seq_rejects_bad_values() {
    assert!(FeatureSeq::new(Array2::<f32>::zeros((0, 4)), Stage::C).is_err());
    assert!(FeatureSeq::new(Array2::from_elem((2, 2), f32::NAN), Stage::C).is_err());
}
