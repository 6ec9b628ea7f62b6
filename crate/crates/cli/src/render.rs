//! Time-series plots (SVG) with CSV twins, so tests assert on the CSV rather than on pixels.
//!
//! Files for clip `id`:
//! - `<id>.series.csv`: one row per frame; envelopes (when audio is known), predicted and
//!   ground-truth channels
//! - `<id>.turns.csv`: one row per shaded turn segment
//! - `<id>.exp.svg`, `<id>.jaw.svg`, `<id>.pose.svg`: channels of one partition over time,
//!   prediction over ground truth when both are given
//! - `<id>.envelope.svg`: both speakers' audio envelopes (clips only)

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plotters::prelude::*;

use dyadic_core::datamodel::{BlendshapeSeq, ClipRecord, Partition, Speaker, TurnSegment};
use dyadic_core::synthgen::audio_envelope;

use crate::Invalid;

pub struct RenderInput<'a> {
    pub id: &'a str,
    pub clip: Option<&'a ClipRecord>,
    pub pred: Option<&'a BlendshapeSeq>,
}

const WIDTH: u32 = 1200;
const HEIGHT: u32 = 400;

fn turn_color(s: Speaker) -> RGBAColor {
    match s {
        Speaker::A => RGBColor(230, 120, 60).mix(0.15),
        Speaker::B => RGBColor(60, 120, 230).mix(0.15),
    }
}

fn speaker_name(s: Speaker) -> &'static str {
    match s {
        Speaker::A => "A",
        Speaker::B => "B",
    }
}

/// Envelopes are cut or zero-extended to the motion frame count.
fn fit_len(mut v: Vec<f32>, frames: usize) -> Vec<f32> {
    v.resize(frames, 0.0);
    v
}

pub fn render_clip(input: &RenderInput<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let gt = input.clip.map(|c| &c.motion_b);
    let primary = input.pred.or(gt).ok_or_else(|| Invalid("render needs a clip or a prediction".into()))?;
    if let (Some(p), Some(g)) = (input.pred, gt) {
        if p.values.dim() != g.values.dim() {
            return Err(Invalid(format!(
                "prediction {} is {:?} but the clip's motion is {:?}",
                input.id,
                p.values.dim(),
                g.values.dim()
            ))
            .into());
        }
    }
    let overlay = input.pred.and(gt);
    let frames = primary.frames();
    let fps = primary.fps;
    let turns: &[TurnSegment] = input.clip.map(|c| c.turns.as_slice()).unwrap_or(&[]);
    let envelopes = match input.clip {
        Some(c) => Some((
            fit_len(audio_envelope(&c.audio_a, fps)?, frames),
            fit_len(audio_envelope(&c.audio_b, fps)?, frames),
        )),
        None => None,
    };

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut files = Vec::new();

    let series = out_dir.join(format!("{}.series.csv", input.id));
    let label = if input.pred.is_some() { "pred" } else { "gt" };
    fs::write(&series, series_csv(primary, label, overlay, envelopes.as_ref()))
        .with_context(|| format!("writing {}", series.display()))?;
    files.push(series);

    let turns_path = out_dir.join(format!("{}.turns.csv", input.id));
    let mut text = String::from("speaker,start_s,end_s\n");
    for t in turns {
        writeln!(text, "{},{},{}", speaker_name(t.speaker), t.start_s, t.end_s).expect("string write");
    }
    fs::write(&turns_path, text).with_context(|| format!("writing {}", turns_path.display()))?;
    files.push(turns_path);

    for p in Partition::ALL {
        let path = out_dir.join(format!("{}.{}.svg", input.id, p.name().to_lowercase()));
        plot_partition(&path, input.id, p, primary, overlay, turns)?;
        files.push(path);
    }
    if let Some((a, b)) = &envelopes {
        let path = out_dir.join(format!("{}.envelope.svg", input.id));
        plot_envelopes(&path, input.id, fps, a, b, turns)?;
        files.push(path);
    }
    Ok(files)
}

fn series_csv(
    primary: &BlendshapeSeq,
    label: &str,
    overlay: Option<&BlendshapeSeq>,
    env: Option<&(Vec<f32>, Vec<f32>)>,
) -> String {
    let channels = primary.channels();
    let mut out = String::from("frame,time_s");
    if env.is_some() {
        out.push_str(",env_a,env_b");
    }
    for c in 0..channels {
        write!(out, ",{label}_{c}").expect("string write");
    }
    if overlay.is_some() {
        for c in 0..channels {
            write!(out, ",gt_{c}").expect("string write");
        }
    }
    out.push('\n');
    for f in 0..primary.frames() {
        write!(out, "{f},{}", f as f64 / primary.fps).expect("string write");
        if let Some((a, b)) = env {
            write!(out, ",{},{}", a[f], b[f]).expect("string write");
        }
        for v in primary.values.row(f) {
            write!(out, ",{v}").expect("string write");
        }
        if let Some(g) = overlay {
            for v in g.values.row(f) {
                write!(out, ",{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    out
}

fn value_range<'a>(values: impl Iterator<Item = &'a f32>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("plotting {}: {e}", path.display())
}

fn plot_partition(
    path: &Path,
    id: &str,
    p: Partition,
    primary: &BlendshapeSeq,
    overlay: Option<&BlendshapeSeq>,
    turns: &[TurnSegment],
) -> Result<()> {
    let view = primary.partition(p);
    let gt_view = overlay.map(|g| g.partition(p));
    let (lo, hi) = value_range(view.iter().chain(gt_view.iter().flat_map(|v| v.iter())));
    let t_end = (primary.frames().max(2) - 1) as f64 / primary.fps;
    let fps = primary.fps;

    let root = SVGBackend::new(path, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let title = match overlay {
        Some(_) => format!("{id} {} (prediction over ground truth)", p.name()),
        None => format!("{id} {}", p.name()),
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..t_end, lo..hi)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("time (s)")
        .disable_mesh()
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(
            turns
                .iter()
                .map(|t| Rectangle::new([(t.start_s, lo), (t.end_s, hi)], turn_color(t.speaker).filled())),
        )
        .map_err(|e| plot_err(path, e))?;
    if let Some(g) = gt_view {
        for col in g.columns() {
            let line = col.iter().enumerate().map(|(f, &v)| (f as f64 / fps, v as f64));
            chart
                .draw_series(LineSeries::new(line, RGBColor(150, 150, 150).stroke_width(1)))
                .map_err(|e| plot_err(path, e))?;
        }
    }
    for (k, col) in view.columns().into_iter().enumerate() {
        let line = col.iter().enumerate().map(|(f, &v)| (f as f64 / fps, v as f64));
        chart
            .draw_series(LineSeries::new(line, Palette99::pick(k).stroke_width(1)))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

fn plot_envelopes(path: &Path, id: &str, fps: f64, a: &[f32], b: &[f32], turns: &[TurnSegment]) -> Result<()> {
    let (_, hi) = value_range(a.iter().chain(b));
    let t_end = (a.len().max(2) - 1) as f64 / fps;
    let root = SVGBackend::new(path, (WIDTH, HEIGHT / 2)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{id} audio envelopes (A orange, B blue)"), ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..t_end, 0.0..hi)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("time (s)")
        .disable_mesh()
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(
            turns
                .iter()
                .map(|t| Rectangle::new([(t.start_s, 0.0), (t.end_s, hi)], turn_color(t.speaker).filled())),
        )
        .map_err(|e| plot_err(path, e))?;
    for (env, color) in [(a, RGBColor(230, 120, 60)), (b, RGBColor(60, 120, 230))] {
        let line = env.iter().enumerate().map(|(f, &v)| (f as f64 / fps, v as f64));
        chart
            .draw_series(LineSeries::new(line, color.stroke_width(1)))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}
