//! Windowed k-means diversity score.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::{BlendshapeSeq, Partition};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 40;
pub const DEFAULT_WINDOW: usize = 25;
pub const MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidResult {
    /// Natural-log entropy of the cluster occupancy histogram.
    pub value: f64,
    /// Clusters requested after capping at the window count.
    pub k: usize,
    pub windows: usize,
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Lloyd's k-means on the rows of `points` with farthest-point initialization: the first centre
/// is the point farthest from the mean, each next one the point farthest from all chosen
/// centres, stopping early once every point coincides with a centre. Ties go to the
/// lexicographically smallest point. Rows are sorted first, so the result does not depend on
/// input order. Returns the assignment of each sorted row and the number of centres used.
pub fn kmeans(points: &Array2<f64>, k: usize, max_iters: usize) -> (Vec<usize>, usize) {
    let n = points.nrows();
    if n == 0 || k == 0 {
        return (Vec::new(), 0);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(points.row(a), points.row(b)));
    let pts = points.select(Axis(0), &order);

    let mean = pts.mean_axis(Axis(0)).expect("non-empty");
    let mut first = 0;
    let mut best = -1.0;
    for i in 0..n {
        let d = dist2(pts.row(i), mean.view());
        if d > best {
            best = d;
            first = i;
        }
    }
    let mut centres = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(pts.row(i), pts.row(first))).collect();
    while centres.len() < k {
        let (idx, &far) = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        if far <= 0.0 {
            break;
        }
        centres.push(idx);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist2(pts.row(i), pts.row(idx)));
        }
    }
    let used = centres.len();
    let mut c = pts.select(Axis(0), &centres);

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for j in 0..used {
                let d = dist2(pts.row(i), c.row(j));
                if d < bd {
                    bd = d;
                    bi = j;
                }
            }
            if assign[i] != bi {
                assign[i] = bi;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(c.raw_dim());
        let mut counts = vec![0usize; used];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &pts.row(i);
            counts[assign[i]] += 1;
        }
        for j in 0..used {
            // empty clusters keep their previous centre
            if counts[j] > 0 {
                c.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
    }
    (assign, used)
}

/// Non-overlapping windows of `window` frames (partial tails dropped) over the partition
/// channels, flattened, clustered with `k` capped at the window count.
pub fn sid_diversity(set: &[BlendshapeSeq], p: Partition, k: usize, window: usize) -> Result<SidResult> {
    if window == 0 || k == 0 {
        return Err(Error::validation("sid", "k and window must be positive"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for seq in set {
        let view = seq.partition(p);
        for w in 0..seq.frames() / window {
            let block = view.slice(ndarray::s![w * window..(w + 1) * window, ..]);
            rows.push(block.iter().map(|&v| v as f64).collect());
        }
    }
    if rows.is_empty() {
        return Err(Error::validation(
            "sid",
            format!("no complete {window}-frame windows in the motion set"),
        ));
    }
    let dim = rows[0].len();
    let windows = rows.len();
    let points = Array2::from_shape_vec((windows, dim), rows.concat()).expect("rectangular windows");
    let k = k.min(windows);
    let (assign, used) = kmeans(&points, k, MAX_ITERS);
    let mut counts = vec![0usize; used];
    for a in assign {
        counts[a] += 1;
    }
    let n = windows as f64;
    let value = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum::<f64>()
        .max(0.0);
    Ok(SidResult { value, k, windows })
}
