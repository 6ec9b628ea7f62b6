//! Reconstruction and velocity losses with their gradients.

use ndarray::{Array2, ArrayView2};

use crate::autodiff::{lit, Scalar};
use crate::datamodel::BlendshapeSeq;
use crate::error::{Error, Result};

/// Loss values and `∂total/∂pred`.
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub blendshape: f64,
    pub velocity: f64,
    pub total: f64,
    pub grad: Array2<T>,
}

fn check_shapes<T>(pred: &ArrayView2<T>, gt: &ArrayView2<T>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("loss", format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    if pred.nrows() == 0 || pred.ncols() == 0 {
        return Err(Error::validation("loss", "empty prediction"));
    }
    Ok(())
}

/// `L_bs + L_vel` over the frames where `valid` holds (all frames when `None`), with the
/// gradient with respect to `pred`. Velocity pairs need both frames valid. Padded frames get a
/// zero gradient.
pub fn loss_terms<T: Scalar>(pred: ArrayView2<T>, gt: ArrayView2<T>, valid: Option<&[bool]>) -> Result<LossTerms<T>> {
    check_shapes(&pred, &gt)?;
    let (n, b) = pred.dim();
    if let Some(v) = valid {
        if v.len() != n {
            return Err(Error::shape("loss mask", format!("{n} frames"), format!("{} frames", v.len())));
        }
    }
    let ok = |i: usize| valid.is_none_or(|v| v[i]);
    let frames = (0..n).filter(|&i| ok(i)).count();
    let pairs = (0..n.saturating_sub(1)).filter(|&i| ok(i) && ok(i + 1)).count();
    if frames == 0 {
        return Err(Error::validation("loss", "no valid frames"));
    }
    if pairs == 0 {
        return Err(Error::validation("loss", "velocity needs at least 2 consecutive frames"));
    }
    let to = |x: T| x.to_f64().expect("finite scalar");
    let bs_norm = (frames * b) as f64;
    let vel_norm = (pairs * b) as f64;

    let mut grad = Array2::<f64>::zeros((n, b));
    let mut bs = 0.0;
    for i in (0..n).filter(|&i| ok(i)) {
        for c in 0..b {
            let r = to(pred[[i, c]]) - to(gt[[i, c]]);
            bs += r * r;
            grad[[i, c]] += 2.0 * r / bs_norm;
        }
    }
    let mut vel = 0.0;
    for i in (0..n - 1).filter(|&i| ok(i) && ok(i + 1)) {
        for c in 0..b {
            let vp = to(pred[[i + 1, c]]) - to(pred[[i, c]]);
            let vg = to(gt[[i + 1, c]]) - to(gt[[i, c]]);
            let r = vp - vg;
            vel += r * r;
            let gr = 2.0 * r / vel_norm;
            grad[[i + 1, c]] += gr;
            grad[[i, c]] -= gr;
        }
    }
    let blendshape = bs / bs_norm;
    let velocity = vel / vel_norm;
    Ok(LossTerms {
        blendshape,
        velocity,
        total: blendshape + velocity,
        grad: grad.mapv(lit),
    })
}

/// Mean squared error over all `N·b` entries.
pub fn loss_blendshape(pred: &BlendshapeSeq, gt: &BlendshapeSeq) -> Result<f64> {
    check_shapes(&pred.values.view(), &gt.values.view())?;
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(gt.values.iter())
        .map(|(&p, &g)| {
            let r = p as f64 - g as f64;
            r * r
        })
        .sum::<f64>()
        / n)
}

/// Mean squared error between first-order frame differences.
pub fn loss_velocity(pred: &BlendshapeSeq, gt: &BlendshapeSeq) -> Result<f64> {
    check_shapes(&pred.values.view(), &gt.values.view())?;
    if pred.frames() < 2 {
        return Err(Error::validation("loss_velocity", "needs at least 2 frames"));
    }
    let (n, b) = pred.values.dim();
    let mut acc = 0.0;
    for i in 0..n - 1 {
        for c in 0..b {
            let vp = pred.values[[i + 1, c]] as f64 - pred.values[[i, c]] as f64;
            let vg = gt.values[[i + 1, c]] as f64 - gt.values[[i, c]] as f64;
            acc += (vp - vg) * (vp - vg);
        }
    }
    Ok(acc / ((n - 1) * b) as f64)
}

/// Unit-weight sum of the two losses.
pub fn loss_total(pred: &BlendshapeSeq, gt: &BlendshapeSeq) -> Result<f64> {
    Ok(loss_blendshape(pred, gt)? + loss_velocity(pred, gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Three identical channels, so every mean equals the single-channel value.
    fn seq(v: &[f32]) -> BlendshapeSeq {
        let values = Array2::from_shape_fn((v.len(), 3), |(i, _)| v[i]);
        let layout = crate::datamodel::PartitionLayout { exp: [0, 1], jaw: [1, 2], pose: [2, 3] };
        BlendshapeSeq::new(values, 25.0, layout).unwrap()
    }

    #[test]
    fn worked_example() {
        let gt = seq(&[0.0, 1.0, 3.0]);
        let pred = seq(&[0.0, 2.0, 3.0]);
        assert_eq!(loss_blendshape(&pred, &gt).unwrap(), 1.0 / 3.0);
        assert_eq!(loss_velocity(&pred, &gt).unwrap(), 1.0);
        assert_eq!(loss_total(&pred, &gt).unwrap(), 1.0 / 3.0 + 1.0);
        let t = loss_terms(pred.values.view(), gt.values.view(), None).unwrap();
        assert_eq!(t.total, 4.0 / 3.0);
    }

    #[test]
    fn offsets() {
        let gt = seq(&[0.0, 1.0, 3.0, -2.0]);
        let shifted = seq(&[1.0, 2.0, 4.0, -1.0]);
        assert_eq!(loss_blendshape(&shifted, &gt).unwrap(), 1.0);
        assert_eq!(loss_velocity(&shifted, &gt).unwrap(), 0.0);
        assert!(loss_velocity(&seq(&[1.0]), &seq(&[1.0])).is_err());
    }

    proptest! {
        /// Values and offsets on a 1/256 grid keep every shifted sample exact in f32, so the
        /// invariance holds bit for bit.
        #[test]
        fn velocity_ignores_constant_offsets(
            pred in proptest::collection::vec(0u16..256, 6),
            gt in proptest::collection::vec(0u16..256, 6),
            offset in -1280i32..=1280,
        ) {
            let grid = |v: &[u16], k: i32| seq(&v.iter().map(|&x| (x as i32 + k) as f32 / 256.0).collect::<Vec<_>>());
            let base = loss_velocity(&grid(&pred, 0), &grid(&gt, 0)).unwrap();
            prop_assert_eq!(loss_velocity(&grid(&pred, offset), &grid(&gt, 0)).unwrap(), base);
            prop_assert_eq!(loss_velocity(&grid(&pred, 0), &grid(&gt, offset)).unwrap(), base);
        }
    }

    #[test]
    fn masked_frames_are_ignored() {
        let pred = array![[0.0f64], [2.0], [3.0], [100.0]];
        let gt = array![[0.0f64], [1.0], [3.0], [-50.0]];
        let t = loss_terms(pred.view(), gt.view(), Some(&[true, true, true, false])).unwrap();
        assert!((t.total - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.grad[[3, 0]], 0.0);
        assert!(loss_terms(pred.view(), gt.view(), Some(&[true, false, true, false])).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let pred = array![[0.3f64, -0.1], [0.7, 0.2], [0.1, 0.9], [0.5, 0.5]];
        let gt = array![[0.2f64, 0.0], [0.1, 0.4], [0.6, 0.3], [0.8, 0.1]];
        let mask = [true, true, true, false];
        let t = loss_terms(pred.view(), gt.view(), Some(&mask)).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for c in 0..2 {
                let mut p = pred.clone();
                p[[i, c]] += h;
                let up = loss_terms(p.view(), gt.view(), Some(&mask)).unwrap().total;
                p[[i, c]] -= 2.0 * h;
                let down = loss_terms(p.view(), gt.view(), Some(&mask)).unwrap().total;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - t.grad[[i, c]]).abs() < 1e-8, "({i},{c})");
            }
        }
    }
}
