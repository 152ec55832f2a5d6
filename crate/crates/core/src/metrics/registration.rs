//! Point-to-point ICP, Chamfer distance and frame-to-frame temporal
//! consistency.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::kdtree::KdTree;
use crate::error::{bail, Result};
use crate::rigid::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the incremental rotation angle plus translation norm drops
    /// below this.
    pub tol: f64,
    pub max_corr_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-10, max_corr_dist: f64::INFINITY }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates into the destination frame.
    pub transform: RigidTransform,
    /// Mean squared correspondence distance after the final update.
    pub residual: f64,
    pub iterations: usize,
}

/// Least-squares rigid fit `dst ≈ R·src + t` over paired points.
pub fn kabsch(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        bail!(Shape, "{} source and {} destination points", src.len(), dst.len());
    }
    if src.len() < 3 {
        bail!(Degenerate, "rigid fit needs at least 3 correspondences, got {}", src.len());
    }
    let n = src.len() as f64;
    let centroid = |pts: &[[f64; 3]]| pts.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) / n;
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (Vector3::from(*s) - cs) * (Vector3::from(*d) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values.as_slice().to_vec();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        bail!(Degenerate, "correspondences are rank deficient (singular values {:?})", sv);
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform::new(r, cd - r * cs))
}

/// Register `src` onto `dst` from the identity.
pub fn icp_align(src: &[[f64; 3]], dst: &[[f64; 3]], cfg: &IcpConfig) -> Result<IcpResult> {
    if src.len() < 3 || dst.len() < 3 {
        bail!(Degenerate, "ICP needs at least 3 points per cloud, got {} and {}", src.len(), dst.len());
    }
    let tree = KdTree::new(dst);
    let max_d2 = cfg.max_corr_dist * cfg.max_corr_dist;
    let mut total = RigidTransform::identity();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters.max(1) {
        iterations += 1;
        let moved: Vec<[f64; 3]> = src.iter().map(|p| total.apply(*p)).collect();
        let pairs: Vec<Option<(usize, f64)>> = moved.par_iter().map(|p| tree.nearest(p).filter(|(_, d)| *d <= max_d2)).collect();
        let (mut a, mut b) = (Vec::with_capacity(src.len()), Vec::with_capacity(src.len()));
        for (p, m) in moved.iter().zip(&pairs) {
            if let Some((j, _)) = m {
                a.push(*p);
                b.push(dst[*j]);
            }
        }
        let step = kabsch(&a, &b)?;
        total = step.compose(&total);
        residual = a.iter().zip(&b).map(|(p, q)| dist2(&step.apply(*p), q)).sum::<f64>() / a.len() as f64;
        if step.rotation_angle() + step.translation.norm() < cfg.tol {
            break;
        }
    }
    Ok(IcpResult { transform: total, residual, iterations })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn directed(p: &[[f64; 3]], tree: &KdTree) -> f64 {
    let d: Vec<f64> = p.par_iter().map(|x| tree.nearest(x).map(|(_, d)| d).unwrap_or(0.0)).collect();
    d.iter().sum::<f64>() / p.len() as f64
}

/// Mean squared nearest-neighbor distance in both directions, summed.
pub fn chamfer(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        bail!(UndefinedInput, "Chamfer distance with an empty cloud ({} and {} points)", p.len(), q.len());
    }
    Ok(directed(p, &KdTree::new(q)) + directed(q, &KdTree::new(p)))
}

/// `(‖R^p − R^g‖_F, ‖t^p − t^g‖)` for one pair; the rotation term equals
/// `‖R^p(R^g)⁻¹ − I‖_F`.
pub fn transform_error(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    ((pred.rotation - gt.rotation).norm(), (pred.translation - gt.translation).norm())
}

/// Means of [`transform_error`] over paired lists.
pub fn ttce(pred: &[RigidTransform], gt: &[RigidTransform]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        bail!(Alignment, "{} estimated vs {} ground-truth transforms", pred.len(), gt.len());
    }
    let (mut r, mut t) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = transform_error(p, g);
        r += a;
        t += b;
    }
    let n = pred.len() as f64;
    Ok((r / n, t / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalReport {
    pub interval: usize,
    pub ttce_rot: f64,
    pub ttce_trans: f64,
    pub ctc: f64,
    pub pairs: usize,
}

/// Where the estimated frame-to-frame motion comes from.
#[derive(Debug, Clone)]
pub enum MotionSource<'a> {
    Icp(IcpConfig),
    /// One transform per unit step, mapping frame `i` to frame `i+1`.
    Provided(&'a [RigidTransform]),
}

/// Composite motion from frame `i` to frame `i+k` given unit steps.
pub fn chain(steps: &[RigidTransform], i: usize, k: usize) -> RigidTransform {
    steps[i..i + k].iter().fold(RigidTransform::identity(), |acc, s| s.compose(&acc))
}

/// TTCE and CTC at each frame gap. `gt[i]` maps frame `i` coordinates to
/// frame `i+1`.
pub fn temporal_consistency(
    seq: &[Vec<[f64; 3]>],
    gt: &[RigidTransform],
    intervals: &[usize],
    source: &MotionSource<'_>,
) -> Result<Vec<TemporalReport>> {
    if gt.len() + 1 != seq.len() {
        bail!(Alignment, "{} frames need {} ground-truth transforms, got {}", seq.len(), seq.len().saturating_sub(1), gt.len());
    }
    if let MotionSource::Provided(p) = source {
        if p.len() != gt.len() {
            bail!(Alignment, "{} provided transforms for {} frame pairs", p.len(), gt.len());
        }
    }
    let mut out = Vec::with_capacity(intervals.len());
    for &k in intervals {
        if k == 0 {
            bail!(Config, "frame interval must be at least 1");
        }
        if seq.len() < k + 1 {
            bail!(InsufficientFrames, "interval {} needs {} frames, sequence has {}", k, k + 1, seq.len());
        }
        let rows: Vec<Result<(f64, f64, f64)>> = (0..seq.len() - k)
            .into_par_iter()
            .map(|i| {
                let g = chain(gt, i, k);
                let p = match source {
                    MotionSource::Icp(cfg) => icp_align(&seq[i], &seq[i + k], cfg)?.transform,
                    MotionSource::Provided(steps) => chain(steps, i, k),
                };
                let (r, t) = transform_error(&p, &g);
                let inv = g.inverse();
                let aligned: Vec<[f64; 3]> = seq[i + k].iter().map(|x| inv.apply(*x)).collect();
                Ok((r, t, chamfer(&seq[i], &aligned)?))
            })
            .collect();
        let mut acc = (0.0, 0.0, 0.0);
        let pairs = rows.len();
        for r in rows {
            let (a, b, c) = r?;
            acc.0 += a;
            acc.1 += b;
            acc.2 += c;
        }
        let n = pairs as f64;
        out.push(TemporalReport { interval: k, ttce_rot: acc.0 / n, ttce_trans: acc.1 / n, ctc: acc.2 / n, pairs });
    }
    Ok(out)
}
