//! Deterministic synthetic dyadic conversations with known audio→motion couplings.
//!
//! Speakers alternate turns of at least two seconds. The speaker's audio is amplitude-modulated
//! band-limited noise (syllable-rate modulation under a slower phrase contour); the listener's
//! track is silent apart from the background noise floor. Motion couplings:
//!
//! | channel            | driven by                                                   |
//! |--------------------|-------------------------------------------------------------|
//! | 50 (jaw)           | `jaw_gain ×` the person's own frame RMS envelope            |
//! | 0 (first EXP)      | while listening: `smile_gain ×` smoothed partner envelope   |
//! | 53 (pose pitch)    | while listening: decaying nods started at partner phrase peaks |
//! | everything else    | small-amplitude smooth noise                                 |

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::datamodel::{
    count_rounds, quantize_pcm16, write_clip, AudioTrack, BlendshapeSeq, ClipFiles, ClipRecord,
    DatasetManifest, ManifestClip, NormalizationStats, Speaker, Splits, TurnSegment, DEFAULT_FPS,
    DEFAULT_SAMPLE_RATE, MIN_TURN_S,
};
use crate::error::{Error, Result};

pub const JAW_CHANNEL: usize = 50;
pub const SMILE_CHANNEL: usize = 0;
pub const NOD_CHANNEL: usize = 53;
const CHANNELS: usize = 56;

/// Standard deviation of the idle drift on uncoupled channels (coefficient units).
pub const IDLE_STD: f64 = 0.001;
/// Channel span floor used when fitting normalization statistics on generated data.
pub const DEFAULT_MIN_SPAN: f64 = 0.1;
/// Half width (frames) of the centred moving average that defines the smoothed envelope.
pub const SMOOTH_HALF_WIDTH: usize = 6;
const NOD_AMPLITUDE: f64 = 0.1;
const NOD_FREQ_HZ: f64 = 1.0;
const NOD_DECAY_S: f64 = 0.35;
/// A nod peak must dominate this many frames on each side, so syllable ripple near a phrase
/// maximum yields one onset rather than several.
const NOD_PEAK_RADIUS: usize = 12;
const NOD_PEAK_FRACTION: f64 = 0.6;
const CARRIER_STD: f64 = 0.3;
const COUPLING_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    pub duration_s: f64,
    pub target_rounds: usize,
    pub jaw_gain: f64,
    pub nod_gain: f64,
    pub smile_gain: f64,
    pub noise_std: f64,
    pub fps: f64,
    pub sample_rate: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 10.0,
            target_rounds: 3,
            jaw_gain: 1.0,
            nod_gain: 1.0,
            smile_gain: 1.0,
            noise_std: 0.0,
            fps: DEFAULT_FPS,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.target_rounds < 1 {
            return Err(Error::validation("target_rounds", "must be at least 1"));
        }
        if !(self.duration_s >= MIN_TURN_S * self.target_rounds as f64) {
            return Err(Error::validation(
                "duration_s",
                format!(
                    "{} s cannot hold {} turns of at least {MIN_TURN_S} s",
                    self.duration_s, self.target_rounds
                ),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std", "must be non-negative"));
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::validation("fps", "fps and sample_rate must be positive"));
        }
        for (name, g) in [
            ("jaw_gain", self.jaw_gain),
            ("nod_gain", self.nod_gain),
            ("smile_gain", self.smile_gain),
        ] {
            if !g.is_finite() {
                return Err(Error::validation(name, "must be finite"));
            }
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

/// Per-frame RMS amplitude over non-overlapping windows of `sample_rate / fps` samples; the last
/// partial window is included. Length is `ceil(T · fps / sample_rate)`.
pub fn audio_envelope(track: &AudioTrack, fps: f64) -> Result<Vec<f32>> {
    if track.samples.is_empty() {
        return Err(Error::validation("audio", "empty track has no envelope"));
    }
    if !(fps > 0.0) {
        return Err(Error::validation("fps", "must be positive"));
    }
    let hop = track.sample_rate as f64 / fps;
    let total = track.samples.len();
    let frames = (total as f64 / hop - 1e-9).ceil().max(1.0) as usize;
    Ok((0..frames)
        .map(|n| {
            let lo = ((n as f64 * hop).floor() as usize).min(total);
            let hi = (((n + 1) as f64 * hop).floor() as usize).min(total);
            let window = &track.samples[lo..hi.max(lo)];
            if window.is_empty() {
                return 0.0;
            }
            let ms = window.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>()
                / window.len() as f64;
            ms.sqrt().min(1.0) as f32
        })
        .collect())
}

/// Centred moving average with half width [`SMOOTH_HALF_WIDTH`], truncated at the edges.
pub fn smooth_envelope(env: &[f32]) -> Vec<f32> {
    let n = env.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(SMOOTH_HALF_WIDTH);
            let hi = (i + SMOOTH_HALF_WIDTH + 1).min(n);
            (env[lo..hi].iter().map(|&v| v as f64).sum::<f64>() / (hi - lo) as f64) as f32
        })
        .collect()
}

/// A generated clip plus the nod onsets placed for each person.
#[derive(Clone, Debug)]
pub struct GeneratedClip {
    pub clip: ClipRecord,
    pub nod_events_a: Vec<usize>,
    pub nod_events_b: Vec<usize>,
}

pub fn generate_clip(id: &str, p: &GenParams) -> Result<ClipRecord> {
    generate_clip_detailed(id, p).map(|g| g.clip)
}

pub fn generate_clip_detailed(id: &str, p: &GenParams) -> Result<GeneratedClip> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let frames = p.frames();
    let hop = p.sample_rate as f64 / p.fps;
    let samples = (frames as f64 * hop).round() as usize;
    let min_turn_frames = (MIN_TURN_S * p.fps).ceil() as usize;
    if frames < min_turn_frames * p.target_rounds {
        return Err(Error::validation(
            "duration_s",
            "frame grid too coarse for the requested rounds",
        ));
    }

    // Turn boundaries on the frame grid.
    let extra = frames - min_turn_frames * p.target_rounds;
    let weights: Vec<f64> = (0..p.target_rounds)
        .map(|_| -rng.random::<f64>().max(1e-12).ln())
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut lengths: Vec<usize> = weights
        .iter()
        .map(|w| min_turn_frames + (extra as f64 * w / wsum).floor() as usize)
        .collect();
    let assigned: usize = lengths.iter().sum();
    *lengths.last_mut().expect("at least one turn") += frames - assigned;
    let first = if rng.random::<bool>() { Speaker::A } else { Speaker::B };
    let mut turns = Vec::with_capacity(lengths.len());
    let mut start = 0usize;
    let mut speaker = first;
    for len in &lengths {
        turns.push(TurnSegment {
            speaker,
            start_s: start as f64 / p.fps,
            end_s: (start + len) as f64 / p.fps,
        });
        start += len;
        speaker = speaker.other();
    }

    let floor_holder = |sample: usize| -> Speaker {
        let frame = ((sample as f64 / hop) as usize).min(frames - 1);
        let t = (frame as f64 + 0.5) / p.fps;
        turns
            .iter()
            .find(|s| t >= s.start_s && t < s.end_s)
            .map(|s| s.speaker)
            .unwrap_or(first)
    };

    let audio_a = synth_voice(&mut rng, p, samples, |n| floor_holder(n) == Speaker::A, &turns, Speaker::A)?;
    let audio_b = synth_voice(&mut rng, p, samples, |n| floor_holder(n) == Speaker::B, &turns, Speaker::B)?;

    let env_a = audio_envelope(&audio_a, p.fps)?;
    let env_b = audio_envelope(&audio_b, p.fps)?;
    debug_assert_eq!(env_a.len(), frames);

    let speaking: Vec<Speaker> = (0..frames)
        .map(|n| {
            let t = (n as f64 + 0.5) / p.fps;
            turns
                .iter()
                .find(|s| t >= s.start_s && t < s.end_s)
                .map(|s| s.speaker)
                .unwrap_or(first)
        })
        .collect();

    let (motion_a, nod_events_a) =
        synth_motion(&mut rng, p, Speaker::A, &env_a, &env_b, &speaking)?;
    let (motion_b, nod_events_b) =
        synth_motion(&mut rng, p, Speaker::B, &env_b, &env_a, &speaking)?;

    let clip = ClipRecord {
        id: id.to_string(),
        audio_a,
        audio_b,
        motion_a,
        motion_b,
        turns,
    };
    clip.validate()?;
    debug_assert_eq!(count_rounds(&clip.turns), p.target_rounds);
    Ok(GeneratedClip {
        clip,
        nod_events_a,
        nod_events_b,
    })
}

fn synth_voice(
    rng: &mut ChaCha8Rng,
    p: &GenParams,
    samples: usize,
    holds_floor: impl Fn(usize) -> bool,
    turns: &[TurnSegment],
    who: Speaker,
) -> Result<AudioTrack> {
    let sr = p.sample_rate as f64;
    let loudness = rng.random_range(0.7..1.0);
    let phrase_hz = rng.random_range(0.5..0.8);
    let phrase_phase = rng.random_range(0.0..2.0 * PI);
    let syllable_hz = rng.random_range(3.5..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let fade_s = 0.1;

    // Band-limited carrier: first-difference high-pass followed by a one-pole low-pass.
    let mut prev_white = 0.0;
    let mut low = 0.0;
    let lp = 0.6;
    // unit-variance correction for the filter pair, measured on long runs
    let gain = 1.0 / 0.8;
    let mut out = Vec::with_capacity(samples);
    for n in 0..samples {
        let white: f64 = StandardNormal.sample(rng);
        let hp = white - 0.5 * prev_white;
        prev_white = white;
        low = lp * low + (1.0 - lp) * hp;
        let carrier = low * gain / (1.0 - lp) * (1.0 - lp);
        let mut value = 0.0;
        if holds_floor(n) {
            let t = n as f64 / sr;
            let phrase = 0.55 + 0.45 * (2.0 * PI * phrase_hz * t + phrase_phase).sin();
            let syllable = 0.5 * (1.0 - (2.0 * PI * syllable_hz * t + syllable_phase).cos());
            let fade = turns
                .iter()
                .find(|s| s.speaker == who && t >= s.start_s && t < s.end_s)
                .map(|s| ((t - s.start_s) / fade_s).min((s.end_s - t) / fade_s).clamp(0.0, 1.0))
                .unwrap_or(0.0);
            let env = loudness * phrase * (0.15 + 0.85 * syllable) * fade;
            value = env * CARRIER_STD * carrier;
        }
        if p.noise_std > 0.0 {
            let bg: f64 = StandardNormal.sample(rng);
            value += p.noise_std * bg;
        }
        out.push(quantize_pcm16(value as f32));
    }
    AudioTrack::new(out, p.sample_rate)
}

fn synth_motion(
    rng: &mut ChaCha8Rng,
    p: &GenParams,
    who: Speaker,
    own_env: &[f32],
    partner_env: &[f32],
    speaking: &[Speaker],
) -> Result<(BlendshapeSeq, Vec<usize>)> {
    let frames = own_env.len();
    let mut values = Array2::<f32>::zeros((frames, CHANNELS));

    // Idle drift on every channel; coupled channels are overwritten below.
    for c in 0..CHANNELS {
        let a = 0.9;
        let mut state: f64 = StandardNormal.sample(rng);
        // unit-variance stationary AR(1), scaled to IDLE_STD
        for n in 0..frames {
            let w: f64 = StandardNormal.sample(rng);
            state = a * state + w * (1.0f64 - a * a).sqrt();
            values[[n, c]] = (state * IDLE_STD) as f32;
        }
    }

    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        if p.noise_std > 0.0 {
            let w: f64 = StandardNormal.sample(rng);
            p.noise_std * COUPLING_JITTER * w
        } else {
            0.0
        }
    };

    for n in 0..frames {
        values[[n, JAW_CHANNEL]] = (p.jaw_gain * own_env[n] as f64 + jitter(rng)) as f32;
    }

    let partner_smooth = smooth_envelope(partner_env);
    let listening: Vec<bool> = speaking.iter().map(|&s| s != who).collect();
    for n in 0..frames {
        let smile = if listening[n] {
            p.smile_gain * partner_smooth[n] as f64
        } else {
            0.0
        };
        values[[n, SMILE_CHANNEL]] = (smile + jitter(rng)) as f32;
    }

    let events = nod_onsets(&partner_smooth, &listening);
    let mut nod = vec![0.0f64; frames];
    for &e in &events {
        for (n, v) in nod.iter_mut().enumerate().skip(e) {
            let dt = (n - e) as f64 / p.fps;
            *v += p.nod_gain * NOD_AMPLITUDE * (-dt / NOD_DECAY_S).exp() * (2.0 * PI * NOD_FREQ_HZ * dt).sin();
        }
    }
    for n in 0..frames {
        values[[n, NOD_CHANNEL]] = (nod[n] + jitter(rng)) as f32;
    }

    Ok((BlendshapeSeq::flame(values, p.fps)?, events))
}

/// Frames inside listening stretches where the partner's smoothed envelope is the maximum of
/// the surrounding ±[`NOD_PEAK_RADIUS`] frames (earliest frame on ties) and reaches a fixed
/// fraction of that stretch's peak.
pub fn nod_onsets(partner_smooth: &[f32], listening: &[bool]) -> Vec<usize> {
    let n = partner_smooth.len();
    let mut events = Vec::new();
    let mut i = 0;
    while i < n {
        if !listening[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && listening[i] {
            i += 1;
        }
        let peak = partner_smooth[start..i].iter().cloned().fold(0.0f32, f32::max);
        if peak <= 0.0 {
            continue;
        }
        for k in start..i {
            let v = partner_smooth[k];
            let lo = k.saturating_sub(NOD_PEAK_RADIUS);
            let hi = (k + NOD_PEAK_RADIUS + 1).min(n);
            let dominates = partner_smooth[lo..k].iter().all(|&u| u < v) && partner_smooth[k + 1..hi].iter().all(|&u| u <= v);
            if dominates && v as f64 >= NOD_PEAK_FRACTION * peak as f64 {
                events.push(k);
            }
        }
    }
    events
}

/// Dataset-level generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub seed: u64,
    pub n_clips: usize,
    /// Fractions of clips in (train, test, ood); positive and summing to one.
    pub split_fractions: [f64; 3],
    pub clip_duration_s: f64,
    /// Relative weight of 1, 2, 3, … rounds per clip.
    pub round_weights: Vec<f64>,
    pub noise_std: f64,
    pub min_span: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clips: 10,
            split_fractions: [0.8, 0.1, 0.1],
            clip_duration_s: 10.0,
            // uniform over 1..=4 rounds: mean 2.5
            round_weights: vec![1.0, 1.0, 1.0, 1.0],
            noise_std: 0.005,
            min_span: DEFAULT_MIN_SPAN,
        }
    }
}

/// Clip counts per split: floor each share, then hand the remainder out one clip at a time in
/// order of largest fractional part (ties resolved train, test, ood).
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::validation(
            "split_fractions",
            "must be positive and sum to 1",
        ));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // guard against 0.1 * 10 = 0.99999… style rounding
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = vec![0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    Ok([counts[0], counts[1], counts[2]])
}

/// SplitMix64 finalizer; derives independent per-clip seeds from the dataset seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-clip generator parameters of clip `index` in a dataset.
pub fn clip_params(d: &DatasetParams, index: usize, ood: bool) -> Result<GenParams> {
    if d.round_weights.is_empty() || d.round_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::validation("round_weights", "need non-negative weights"));
    }
    let total: f64 = d.round_weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::validation("round_weights", "need a positive weight"));
    }
    let clip_seed = derive_seed(d.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed ^ 0x5EED);
    let mut u = rng.random::<f64>() * total;
    let mut rounds = d.round_weights.len();
    for (i, &w) in d.round_weights.iter().enumerate() {
        if u < w {
            rounds = i + 1;
            break;
        }
        u -= w;
    }
    // in-distribution and out-of-distribution speaking styles use disjoint gain ranges
    let gains = if ood { 1.3..1.6 } else { 0.8..1.2 };
    Ok(GenParams {
        seed: clip_seed,
        duration_s: d.clip_duration_s,
        target_rounds: rounds,
        jaw_gain: rng.random_range(gains.clone()),
        nod_gain: rng.random_range(gains.clone()),
        smile_gain: rng.random_range(gains),
        noise_std: d.noise_std,
        fps: DEFAULT_FPS,
        sample_rate: DEFAULT_SAMPLE_RATE,
    })
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Generates `n_clips` clips under `out_dir/clips`, fits normalization statistics on the train
/// split and writes `out_dir/manifest.json`. Clip `i` goes to train, test, then ood in index order.
pub fn generate_dataset(d: &DatasetParams, out_dir: &Path) -> Result<DatasetManifest> {
    let counts = split_counts(d.n_clips, d.split_fractions)?;
    let clip_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;

    let split_of = |i: usize| {
        if i < counts[0] {
            0
        } else if i < counts[0] + counts[1] {
            1
        } else {
            2
        }
    };
    let generated: Vec<(ManifestClip, Option<(BlendshapeSeq, BlendshapeSeq)>)> = (0..d.n_clips)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let split = split_of(i);
            let params = clip_params(d, i, split == 2)?;
            let id = clip_id(i);
            let clip = generate_clip(&id, &params)?;
            write_clip(&clip, &clip_dir)?;
            let entry = ManifestClip {
                id: id.clone(),
                files: ClipFiles::new(Path::new("clips"), &id),
                duration_s: clip.duration_s(),
                round_count: clip.rounds(),
            };
            let motion = (split == 0).then(|| (clip.motion_a, clip.motion_b));
            Ok((entry, motion))
        })
        .collect::<Result<_>>()?;

    let train_motion: Vec<&BlendshapeSeq> = generated
        .iter()
        .filter_map(|(_, m)| m.as_ref())
        .flat_map(|(a, b)| [a, b])
        .collect();
    let norm_stats = NormalizationStats::fit(train_motion, d.min_span)?;

    let mut splits = Splits::default();
    for (i, (entry, _)) in generated.iter().enumerate() {
        match split_of(i) {
            0 => splits.train.push(entry.id.clone()),
            1 => splits.test.push(entry.id.clone()),
            _ => splits.ood.push(entry.id.clone()),
        }
    }
    let manifest = DatasetManifest::new(
        out_dir,
        generated.into_iter().map(|(e, _)| e).collect(),
        splits,
        DEFAULT_FPS,
        DEFAULT_SAMPLE_RATE,
        norm_stats,
    );
    manifest.save()?;
    Ok(manifest)
}
