//! Motion evaluation: Fréchet distance (FD), paired FD, MSE, k-means diversity (SID) and the
//! residual A↔B correlation gap (rPCC), each computed per EXP/JAW/POSE partition.
//!
//! All statistics run in `f64` on raw (denormalized) coefficients. FD is computed directly on
//! per-frame coefficient vectors; [`FeatureExtractor`] is the hook for a learned motion encoder.

mod report;
mod sid;

pub use report::{evaluate_sets, evaluate_suite, MetricReport, PartitionMetrics};
pub use sid::{kmeans, sid_diversity, SidResult};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::datamodel::{BlendshapeSeq, Partition};
use crate::error::{Error, Result};

/// Eigenvalues below this are a non-PSD input; between it and zero they are clamped.
pub const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Maps a `[frames × channels]` block to per-frame feature vectors before Gaussian fitting.
pub trait FeatureExtractor {
    fn extract(&self, frames: ArrayView2<f64>) -> Array2<f64>;
}

/// Column means and population (divide-by-n) covariance.
pub fn fit_gaussian(x: ArrayView2<f64>) -> Result<GaussianStats> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::validation("features", format!("need at least 2 rows, got {n}")));
    }
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = &x - &mu;
    let mut sigma = centred.t().dot(&centred) / n as f64;
    // exact symmetry regardless of summation order
    let m = sigma.ncols();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (sigma[[i, j]] + sigma[[j, i]]);
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    Ok(GaussianStats { mu, sigma })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Principal square root of a symmetric PSD matrix via its eigendecomposition.
fn psd_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {v:.3e}, below -{PSD_TOLERANCE:e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`.
///
/// `tr((Σ1Σ2)^{1/2})` is evaluated as the sum of singular values of `Σ1^{1/2}Σ2^{1/2}`, which
/// equals the trace of the square root of the symmetrized product `Σ1^{1/2}Σ2Σ1^{1/2}` without
/// squaring small eigenvalues first.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.dim() != s2.dim() || s1.sigma.dim() != (s1.dim(), s1.dim()) || s2.sigma.dim() != (s2.dim(), s2.dim()) {
        return Err(Error::shape(
            "gaussian statistics",
            format!("dimension {}", s1.dim()),
            format!("dimension {}", s2.dim()),
        ));
    }
    let diff = &s1.mu - &s2.mu;
    let mean_term = diff.dot(&diff);
    let a = psd_sqrt(&to_dmatrix(&s1.sigma), "first covariance")?;
    let b = psd_sqrt(&to_dmatrix(&s2.sigma), "second covariance")?;
    let cross: f64 = (a * b).singular_values().iter().sum();
    let trace = s1.sigma.diag().sum() + s2.sigma.diag().sum() - 2.0 * cross;
    Ok((mean_term + trace).max(0.0))
}

/// Stacks the partition channels of every frame of every sequence into `[frames × |p|]`.
pub fn partition_frames(set: &[BlendshapeSeq], p: Partition) -> Array2<f64> {
    let width = set.first().map_or(0, |s| s.layout.range(p).len());
    let rows: usize = set.iter().map(|s| s.frames()).sum();
    let mut out = Array2::<f64>::zeros((rows, width));
    let mut r = 0;
    for seq in set {
        let view = seq.partition(p);
        for row in view.outer_iter() {
            out.row_mut(r).assign(&row.mapv(|v| v as f64));
            r += 1;
        }
    }
    out
}

fn check_aligned(name: &str, a: &[BlendshapeSeq], b: &[BlendshapeSeq]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::validation(name, format!("{} clips vs {} clips", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::validation(name, "empty motion set"));
    }
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if x.values.dim() != y.values.dim() || x.layout != y.layout {
            return Err(Error::shape(
                format!("{name} clip {k}"),
                format!("{:?}", y.values.dim()),
                format!("{:?}", x.values.dim()),
            ));
        }
    }
    Ok(())
}

/// FD between the per-frame distributions of two motion sets on one partition.
pub fn fd_metric(gen: &[BlendshapeSeq], gt: &[BlendshapeSeq], p: Partition) -> Result<f64> {
    if gen.is_empty() || gt.is_empty() {
        return Err(Error::validation("fd", "empty motion set"));
    }
    let g = fit_gaussian(partition_frames(gen, p).view())?;
    let t = fit_gaussian(partition_frames(gt, p).view())?;
    frechet_distance(&g, &t)
}

/// [`fd_metric`] on features produced by `extractor` from each clip's partition channels.
pub fn fd_metric_with<E: FeatureExtractor>(
    gen: &[BlendshapeSeq],
    gt: &[BlendshapeSeq],
    p: Partition,
    extractor: &E,
) -> Result<f64> {
    let features = |set: &[BlendshapeSeq]| -> Result<Array2<f64>> {
        let blocks: Vec<Array2<f64>> = set
            .iter()
            .map(|s| extractor.extract(partition_frames(std::slice::from_ref(s), p).view()))
            .collect();
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::validation("features", e.to_string()))
    };
    frechet_distance(&fit_gaussian(features(gen)?.view())?, &fit_gaussian(features(gt)?.view())?)
}

/// Mean squared difference over every frame, clip and partition channel.
pub fn mse_metric(gen: &[BlendshapeSeq], gt: &[BlendshapeSeq], p: Partition) -> Result<f64> {
    check_aligned("mse", gen, gt)?;
    let a = partition_frames(gen, p);
    let b = partition_frames(gt, p);
    let n = a.len();
    if n == 0 {
        return Err(Error::validation("mse", "no values"));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

fn paired_frames(b: &[BlendshapeSeq], a: &[BlendshapeSeq], p: Partition) -> Result<Array2<f64>> {
    let fb = partition_frames(b, p);
    let fa = partition_frames(a, p);
    ndarray::concatenate(Axis(1), &[fb.view(), fa.view()])
        .map_err(|e| Error::validation("paired features", e.to_string()))
}

/// FD on frame-wise concatenations `[B ‖ A]`, so it also sees the joint B/A behaviour.
pub fn paired_fd(gen_b: &[BlendshapeSeq], gt_b: &[BlendshapeSeq], a: &[BlendshapeSeq], p: Partition) -> Result<f64> {
    check_aligned("paired_fd", gen_b, a)?;
    check_aligned("paired_fd", gt_b, a)?;
    let g = fit_gaussian(paired_frames(gen_b, a, p)?.view())?;
    let t = fit_gaussian(paired_frames(gt_b, a, p)?.view())?;
    frechet_distance(&g, &t)
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Mean over clips and partition channels of `|r(A_c, genB_c) − r(A_c, gtB_c)|`.
pub fn rpcc(gen_b: &[BlendshapeSeq], gt_b: &[BlendshapeSeq], a: &[BlendshapeSeq], p: Partition) -> Result<f64> {
    check_aligned("rpcc", gen_b, a)?;
    check_aligned("rpcc", gt_b, a)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((g, t), s) in gen_b.iter().zip(gt_b).zip(a) {
        if s.frames() < 2 {
            return Err(Error::validation("rpcc", "clips need at least 2 frames"));
        }
        for c in s.layout.range(p) {
            let col = |m: &BlendshapeSeq| -> Vec<f64> { m.values.column(c).iter().map(|&v| v as f64).collect() };
            let av = col(s);
            total += (pearson(&av, &col(g)) - pearson(&av, &col(t))).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
