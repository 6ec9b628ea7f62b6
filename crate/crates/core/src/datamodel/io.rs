//! On-disk clip layout:
//!
//! ```text
//! <dir>/<id>.a.wav  <id>.b.wav     PCM16 mono
//! <dir>/<id>.a.f32  <id>.b.f32     row-major little-endian f32 [frames × channels]
//! <dir>/<id>.meta.json             frames, channels, fps, sample rate, partitions, turns, id
//! ```
//!
//! Predictions reuse the motion payload format: `<id>.b.f32` plus `<id>.pred.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    f32_to_pcm16, pcm16_to_f32, AudioTrack, BlendshapeSeq, ClipRecord, PartitionLayout,
    TurnSegment,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipFiles {
    pub audio_a: PathBuf,
    pub audio_b: PathBuf,
    pub motion_a: PathBuf,
    pub motion_b: PathBuf,
    pub meta: PathBuf,
}

impl ClipFiles {
    pub fn new(dir: &Path, id: &str) -> Self {
        Self {
            audio_a: dir.join(format!("{id}.a.wav")),
            audio_b: dir.join(format!("{id}.b.wav")),
            motion_a: dir.join(format!("{id}.a.f32")),
            motion_b: dir.join(format!("{id}.b.f32")),
            meta: dir.join(format!("{id}.meta.json")),
        }
    }

    pub fn all(&self) -> [&Path; 5] {
        [
            &self.audio_a,
            &self.audio_b,
            &self.motion_a,
            &self.motion_b,
            &self.meta,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    id: String,
    frames: usize,
    channels: usize,
    fps: f64,
    sample_rate: u32,
    partitions: PartitionLayout,
    turns: Vec<TurnSegment>,
}

/// Sidecar of a standalone motion payload (model predictions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionMeta {
    pub id: String,
    pub frames: usize,
    pub channels: usize,
    pub fps: f64,
    pub partitions: PartitionLayout,
}

/// Writes the five files of a clip and returns their paths.
pub fn write_clip(clip: &ClipRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    clip.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ClipFiles::new(dir, &clip.id);
    write_wav(&files.audio_a, &clip.audio_a)?;
    write_wav(&files.audio_b, &clip.audio_b)?;
    write_payload(&files.motion_a, &clip.motion_a.values)?;
    write_payload(&files.motion_b, &clip.motion_b.values)?;
    let meta = ClipMeta {
        id: clip.id.clone(),
        frames: clip.frames(),
        channels: clip.motion_a.channels(),
        fps: clip.fps(),
        sample_rate: clip.audio_a.sample_rate,
        partitions: clip.motion_a.layout.clone(),
        turns: clip.turns.clone(),
    };
    write_json(&files.meta, &meta)?;
    Ok(files.all().iter().map(|p| p.to_path_buf()).collect())
}

/// Reads a clip written by [`write_clip`]; round trips are exact.
pub fn read_clip(dir: &Path, id: &str) -> Result<ClipRecord> {
    let files = ClipFiles::new(dir, id);
    let meta: ClipMeta = read_json(&files.meta)?;
    if meta.id != id {
        return Err(Error::validation(
            "id",
            format!("sidecar names clip {:?}, expected {id:?}", meta.id),
        ));
    }
    let audio_a = read_wav(&files.audio_a, meta.sample_rate)?;
    let audio_b = read_wav(&files.audio_b, meta.sample_rate)?;
    let motion = |path: &Path| -> Result<BlendshapeSeq> {
        let values = read_payload(path, meta.frames, meta.channels)?;
        BlendshapeSeq::new(values, meta.fps, meta.partitions.clone())
    };
    let clip = ClipRecord {
        id: meta.id.clone(),
        audio_a,
        audio_b,
        motion_a: motion(&files.motion_a)?,
        motion_b: motion(&files.motion_b)?,
        turns: meta.turns.clone(),
    };
    clip.validate()?;
    Ok(clip)
}

pub fn write_motion(dir: &Path, id: &str, seq: &BlendshapeSeq) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_payload(&dir.join(format!("{id}.b.f32")), &seq.values)?;
    let meta = MotionMeta {
        id: id.to_string(),
        frames: seq.frames(),
        channels: seq.channels(),
        fps: seq.fps,
        partitions: seq.layout.clone(),
    };
    write_json(&dir.join(format!("{id}.pred.json")), &meta)
}

pub fn read_motion(dir: &Path, id: &str) -> Result<BlendshapeSeq> {
    let meta: MotionMeta = read_json(&dir.join(format!("{id}.pred.json")))?;
    let values = read_payload(&dir.join(format!("{id}.b.f32")), meta.frames, meta.channels)?;
    BlendshapeSeq::new(values, meta.fps, meta.partitions)
}

fn write_wav(path: &Path, track: &AudioTrack) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: track.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &track.samples {
        w.write_sample(f32_to_pcm16(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

fn read_wav(path: &Path, expected_rate: u32) -> Result<AudioTrack> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::validation(
            "audio",
            format!("{} is not 16-bit PCM mono", path.display()),
        ));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::RateMismatch {
            path: path.to_path_buf(),
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(pcm16_to_f32))
        .collect::<Result<Vec<f32>, _>>()
        .map_err(wav_err)?;
    AudioTrack::new(samples, spec.sample_rate)
}

pub(crate) fn write_payload(path: &Path, values: &Array2<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values.as_standard_layout().iter() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_payload(path: &Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::shape(
            format!("payload {}", path.display()),
            format!("{expected} bytes ({rows} × {cols} f32)"),
            format!("{} bytes", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} at element {pos}",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked above"))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
