//! Clip and manifest data model shared by every other module.
//!
//! A clip holds one dyadic conversation: one mono audio track and one blendshape sequence per
//! speaker plus the turn annotations. Motion values live in raw coefficient space on disk and are
//! min-max normalized per channel (statistics from the train split) before entering the model.

mod io;
mod manifest;

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_clip, read_motion, write_clip, write_motion, ClipFiles, MotionMeta};
pub(crate) use io::{read_json, read_payload, write_json, write_payload};
pub use manifest::{DatasetManifest, ManifestClip, Split, Splits};

pub const DEFAULT_FPS: f64 = 25.0;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_CHANNELS: usize = 56;
pub const MIN_TURN_S: f64 = 2.0;

/// Slack for comparisons between times that were computed from frame counts.
const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Exp,
    Jaw,
    Pose,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Exp, Partition::Jaw, Partition::Pose];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Exp => "EXP",
            Partition::Jaw => "JAW",
            Partition::Pose => "POSE",
        }
    }
}

/// Half-open channel ranges of the expression, jaw and pose groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub exp: [usize; 2],
    pub jaw: [usize; 2],
    pub pose: [usize; 2],
}

impl Default for PartitionLayout {
    fn default() -> Self {
        Self::flame56()
    }
}

impl PartitionLayout {
    /// 50 expression, 3 jaw and 3 head-pose coefficients.
    pub fn flame56() -> Self {
        Self {
            exp: [0, 50],
            jaw: [50, 53],
            pose: [53, 56],
        }
    }

    pub fn range(&self, p: Partition) -> Range<usize> {
        let [a, b] = match p {
            Partition::Exp => self.exp,
            Partition::Jaw => self.jaw,
            Partition::Pose => self.pose,
        };
        a..b
    }

    /// Ranges must be non-empty, disjoint and cover `0..channels` exactly.
    pub fn validate(&self, channels: usize) -> Result<()> {
        let mut ranges: Vec<Range<usize>> = Partition::ALL.iter().map(|&p| self.range(p)).collect();
        if ranges.iter().any(|r| r.start >= r.end) {
            return Err(Error::validation("partitions", "empty or inverted range"));
        }
        ranges.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in &ranges {
            if r.start != next {
                return Err(Error::validation(
                    "partitions",
                    "ranges must be disjoint and exhaustive",
                ));
            }
            next = r.end;
        }
        if next != channels {
            return Err(Error::validation(
                "partitions",
                format!("ranges cover {next} channels, sequence has {channels}"),
            ));
        }
        Ok(())
    }
}

/// Frame-indexed coefficient sequence `[frames × channels]` for one person.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeSeq {
    pub values: Array2<f32>,
    pub fps: f64,
    pub layout: PartitionLayout,
}

impl BlendshapeSeq {
    pub fn new(values: Array2<f32>, fps: f64, layout: PartitionLayout) -> Result<Self> {
        let seq = Self {
            values: values.as_standard_layout().into_owned(),
            fps,
            layout,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Sequence with the default 56-channel layout.
    pub fn flame(values: Array2<f32>, fps: f64) -> Result<Self> {
        Self::new(values, fps, PartitionLayout::flame56())
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() == 0 {
            return Err(Error::validation("motion", "needs at least one frame"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::validation("fps", "must be positive"));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "motion value at flat index {pos}"
            )));
        }
        self.layout.validate(self.values.ncols())
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    pub fn partition(&self, p: Partition) -> ArrayView2<'_, f32> {
        self.values.slice_axis(Axis(1), self.layout.range(p).into())
    }
}

/// Mono audio, samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let t = Self {
            samples,
            sample_rate,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::validation("sample_rate", "must be positive"));
        }
        if let Some(pos) = self
            .samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::validation(
                "audio",
                format!("sample {pos} is not a finite value in [-1, 1]"),
            ));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Snaps a sample to the PCM16 grid used on disk, so WAV round trips are sample-exact.
#[inline]
pub fn quantize_pcm16(x: f32) -> f32 {
    pcm16_to_f32(f32_to_pcm16(x))
}

#[inline]
pub(crate) fn f32_to_pcm16(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[inline]
pub(crate) fn pcm16_to_f32(q: i16) -> f32 {
    (q.max(-32767)) as f32 / 32767.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnSegment {
    pub speaker: Speaker,
    pub start_s: f64,
    pub end_s: f64,
}

impl TurnSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Whether the frame whose centre lies at `(frame + 0.5) / fps` falls inside the turn.
    pub fn contains_frame(&self, frame: usize, fps: f64) -> bool {
        let t = (frame as f64 + 0.5) / fps;
        t >= self.start_s && t < self.end_s
    }
}

/// Turns must each last at least [`MIN_TURN_S`] and be time-ordered without overlap.
pub fn validate_turns(turns: &[TurnSegment]) -> Result<()> {
    for (i, t) in turns.iter().enumerate() {
        if !(t.start_s.is_finite() && t.end_s.is_finite()) || t.start_s < 0.0 {
            return Err(Error::validation("turns", format!("turn {i} has invalid bounds")));
        }
        if t.duration_s() < MIN_TURN_S - TIME_EPS {
            return Err(Error::validation(
                "turns",
                format!(
                    "turn {i} lasts {:.3} s, minimum is {MIN_TURN_S} s",
                    t.duration_s()
                ),
            ));
        }
    }
    for w in turns.windows(2) {
        if w[1].start_s < w[0].end_s - TIME_EPS {
            return Err(Error::validation("turns", "turns overlap"));
        }
    }
    Ok(())
}

/// Number of conversation rounds: one plus the number of floor exchanges between adjacent
/// turns. An empty annotation has zero rounds.
pub fn count_rounds(turns: &[TurnSegment]) -> usize {
    if turns.is_empty() {
        return 0;
    }
    1 + turns
        .windows(2)
        .filter(|w| w[0].speaker != w[1].speaker)
        .count()
}

/// Which speaker holds the floor at each frame, `None` between turns.
pub fn frame_speakers(turns: &[TurnSegment], frames: usize, fps: f64) -> Vec<Option<Speaker>> {
    (0..frames)
        .map(|n| {
            turns
                .iter()
                .find(|t| t.contains_frame(n, fps))
                .map(|t| t.speaker)
        })
        .collect()
}

/// One dyadic conversation clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub audio_a: AudioTrack,
    pub audio_b: AudioTrack,
    pub motion_a: BlendshapeSeq,
    pub motion_b: BlendshapeSeq,
    pub turns: Vec<TurnSegment>,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::validation("id", "must be a non-empty file-name-safe string"));
        }
        self.audio_a.validate()?;
        self.audio_b.validate()?;
        self.motion_a.validate()?;
        self.motion_b.validate()?;
        if self.audio_a.sample_rate != self.audio_b.sample_rate {
            return Err(Error::validation("sample_rate", "speakers use different sample rates"));
        }
        if self.motion_a.frames() != self.motion_b.frames() {
            return Err(Error::validation(
                "motion_b",
                format!(
                    "{} frames, speaker A has {}",
                    self.motion_b.frames(),
                    self.motion_a.frames()
                ),
            ));
        }
        if self.motion_a.channels() != self.motion_b.channels()
            || self.motion_a.layout != self.motion_b.layout
        {
            return Err(Error::validation("motion_b", "channel layout differs from speaker A"));
        }
        if self.motion_a.fps != self.motion_b.fps {
            return Err(Error::validation("motion_b", "fps differs from speaker A"));
        }
        let frame_period = 1.0 / self.motion_a.fps;
        let motion_dur = self.motion_a.duration_s();
        for (name, track) in [("audio_a", &self.audio_a), ("audio_b", &self.audio_b)] {
            if (track.duration_s() - motion_dur).abs() > frame_period + TIME_EPS {
                return Err(Error::validation(
                    name,
                    format!(
                        "lasts {:.4} s but motion lasts {:.4} s",
                        track.duration_s(),
                        motion_dur
                    ),
                ));
            }
        }
        validate_turns(&self.turns)?;
        if let Some(last) = self.turns.last() {
            if last.end_s > motion_dur + frame_period + TIME_EPS {
                return Err(Error::validation("turns", "turn extends past the end of the clip"));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.motion_a.frames()
    }

    pub fn fps(&self) -> f64 {
        self.motion_a.fps
    }

    pub fn duration_s(&self) -> f64 {
        self.motion_a.duration_s()
    }

    pub fn rounds(&self) -> usize {
        count_rounds(&self.turns)
    }
}

/// Per-channel min/max used to map coefficients into `[0, 1]` for the sigmoid head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        let s = Self { min, max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::shape("norm_stats", self.min.len(), self.max.len()));
        }
        if self
            .min
            .iter()
            .zip(&self.max)
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && hi >= lo))
        {
            return Err(Error::validation("norm_stats", "need finite min <= max per channel"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// Fits statistics over sequences (the train split). Channels whose observed range is below
    /// `min_span` are widened symmetrically to `min_span`, so near-constant channels are not
    /// stretched to the full unit interval.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a BlendshapeSeq>, min_span: f64) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for seq in seqs {
            if min.is_empty() {
                min = vec![f64::INFINITY; seq.channels()];
                max = vec![f64::NEG_INFINITY; seq.channels()];
            }
            if seq.channels() != min.len() {
                return Err(Error::shape("norm_stats fit", min.len(), seq.channels()));
            }
            for row in seq.values.outer_iter() {
                for (c, &v) in row.iter().enumerate() {
                    min[c] = min[c].min(v as f64);
                    max[c] = max[c].max(v as f64);
                }
            }
        }
        if min.is_empty() {
            return Err(Error::validation("norm_stats", "no sequences to fit"));
        }
        for c in 0..min.len() {
            let span = max[c] - min[c];
            if span < min_span {
                let centre = 0.5 * (max[c] + min[c]);
                min[c] = centre - 0.5 * min_span;
                max[c] = centre + 0.5 * min_span;
            }
        }
        Self::new(min, max)
    }

    fn check(&self, seq: &BlendshapeSeq) -> Result<()> {
        if seq.channels() != self.channels() {
            return Err(Error::shape(
                "normalization channels",
                self.channels(),
                seq.channels(),
            ));
        }
        Ok(())
    }
}

/// `(x - min) / (max - min)` per channel; degenerate channels (`max == min`) map to 0.5.
pub fn normalize_motion(seq: &BlendshapeSeq, stats: &NormalizationStats) -> Result<BlendshapeSeq> {
    stats.check(seq)?;
    let mut out = seq.clone();
    for mut row in out.values.outer_iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            let span = stats.max[c] - stats.min[c];
            *v = if span > 0.0 {
                ((*v as f64 - stats.min[c]) / span) as f32
            } else {
                0.5
            };
        }
    }
    Ok(out)
}

/// Inverse of [`normalize_motion`]; degenerate channels map back to their constant.
pub fn denormalize_motion(
    seq: &BlendshapeSeq,
    stats: &NormalizationStats,
) -> Result<BlendshapeSeq> {
    stats.check(seq)?;
    let mut out = seq.clone();
    for mut row in out.values.outer_iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            let span = stats.max[c] - stats.min[c];
            *v = (*v as f64 * span + stats.min[c]) as f32;
        }
    }
    Ok(out)
}
