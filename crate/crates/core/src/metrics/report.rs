use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sid::{DEFAULT_K, DEFAULT_WINDOW};
use super::{fd_metric, mse_metric, paired_fd, rpcc, sid_diversity};
use crate::datamodel::{read_json, read_motion, write_json, BlendshapeSeq, DatasetManifest, Partition, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionMetrics {
    pub fd: f64,
    pub p_fd: f64,
    pub mse: f64,
    /// Diversity of the generated set.
    pub sid: f64,
    /// Diversity of the ground-truth set, for reference.
    pub sid_gt: f64,
    /// Clusters used by SID (40 unless fewer windows exist).
    pub sid_k: usize,
    pub rpcc: f64,
}

/// Raw metric values per partition. Display scaling is applied only by [`MetricReport::to_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub split: String,
    pub clips: usize,
    pub frames: usize,
    pub exp: PartitionMetrics,
    pub jaw: PartitionMetrics,
    pub pose: PartitionMetrics,
}

/// Multipliers of the conventional result table: (FD and P-FD, MSE, SID, rPCC).
pub fn display_scale(p: Partition) -> [f64; 4] {
    match p {
        Partition::Exp => [1.0, 10.0, 1.0, 100.0],
        Partition::Jaw => [1e3, 1e3, 1.0, 10.0],
        Partition::Pose => [1e2, 1e2, 1.0, 10.0],
    }
}

impl MetricReport {
    pub fn partition(&self, p: Partition) -> &PartitionMetrics {
        match p {
            Partition::Exp => &self.exp,
            Partition::Jaw => &self.jaw,
            Partition::Pose => &self.pose,
        }
    }

    pub fn all_finite(&self) -> bool {
        Partition::ALL.iter().all(|&p| {
            let m = self.partition(p);
            [m.fd, m.p_fd, m.mse, m.sid, m.sid_gt, m.rpcc]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
        })
    }

    /// One header row and one value row laid out metric-major (`FD_EXP, FD_JAW, …`).
    /// With `display` the conventional table multipliers are applied.
    pub fn to_csv(&self, display: bool) -> String {
        let mut header = Vec::new();
        let mut values = Vec::new();
        for (k, name) in ["FD", "P-FD", "MSE", "SID", "rPCC"].iter().enumerate() {
            for p in Partition::ALL {
                let m = self.partition(p);
                let (raw, scale_idx) = match k {
                    0 => (m.fd, 0),
                    1 => (m.p_fd, 0),
                    2 => (m.mse, 1),
                    3 => (m.sid, 2),
                    _ => (m.rpcc, 3),
                };
                let scale = if display { display_scale(p)[scale_idx] } else { 1.0 };
                header.push(format!("{name}_{}", p.name().to_uppercase()));
                values.push(raw * scale);
            }
        }
        let mut out = String::new();
        writeln!(out, "split,{}", header.join(",")).unwrap();
        let row: Vec<String> = values.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(out, "{},{}", self.split, row.join(",")).unwrap();
        out
    }

    /// Writes `metrics.json`, `metrics.csv` (raw) and `metrics_display.csv`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        write_json(&json, self)?;
        let raw = dir.join("metrics.csv");
        std::fs::write(&raw, self.to_csv(false)).map_err(|e| Error::io(&raw, e))?;
        let display = dir.join("metrics_display.csv");
        std::fs::write(&display, self.to_csv(true)).map_err(|e| Error::io(&display, e))?;
        Ok(vec![json, raw, display])
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Metrics of generated B motion against ground truth, with A as the interlocutor; all sets
/// in raw coefficient space and aligned clip by clip.
pub fn evaluate_sets(split: &str, gen_b: &[BlendshapeSeq], gt_b: &[BlendshapeSeq], a: &[BlendshapeSeq]) -> Result<MetricReport> {
    let part = |p: Partition| -> Result<PartitionMetrics> {
        let sid = sid_diversity(gen_b, p, DEFAULT_K, DEFAULT_WINDOW)?;
        let sid_gt = sid_diversity(gt_b, p, DEFAULT_K, DEFAULT_WINDOW)?;
        Ok(PartitionMetrics {
            fd: fd_metric(gen_b, gt_b, p)?,
            p_fd: paired_fd(gen_b, gt_b, a, p)?,
            mse: mse_metric(gen_b, gt_b, p)?,
            sid: sid.value,
            sid_gt: sid_gt.value,
            sid_k: sid.k,
            rpcc: rpcc(gen_b, gt_b, a, p)?,
        })
    };
    Ok(MetricReport {
        split: split.to_string(),
        clips: gen_b.len(),
        frames: gen_b.iter().map(|s| s.frames()).sum(),
        exp: part(Partition::Exp)?,
        jaw: part(Partition::Jaw)?,
        pose: part(Partition::Pose)?,
    })
}

/// Evaluates the predictions in `pred_dir` (raw coefficient space, `<id>.b.f32` +
/// `<id>.pred.json`) against every clip of `split`. Missing predictions are reported together.
pub fn evaluate_suite(manifest: &DatasetManifest, pred_dir: &Path, split: Split) -> Result<MetricReport> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::validation("split", format!("{split} split is empty")));
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| {
            !pred_dir.join(format!("{id}.b.f32")).exists() || !pred_dir.join(format!("{id}.pred.json")).exists()
        })
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let mut gen_b = Vec::with_capacity(ids.len());
    let mut gt_b = Vec::with_capacity(ids.len());
    let mut a = Vec::with_capacity(ids.len());
    for id in ids {
        let clip = manifest.load_clip(id)?;
        let pred = read_motion(pred_dir, id)?;
        if pred.values.dim() != clip.motion_b.values.dim() {
            return Err(Error::shape(
                format!("prediction {id}"),
                format!("{:?}", clip.motion_b.values.dim()),
                format!("{:?}", pred.values.dim()),
            ));
        }
        gen_b.push(pred);
        gt_b.push(clip.motion_b);
        a.push(clip.motion_a);
    }
    evaluate_sets(split.name(), &gen_b, &gt_b, &a)
}
