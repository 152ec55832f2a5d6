//! Set-level evaluation of generated against reference sequences.

use std::path::{Path, PathBuf};

use u4d_core::io::{read_matrix, read_point_bin};
use u4d_core::metrics::{
    bev_histogram, feature_moments, gaussian_frechet, jsd, mmd, temporal_consistency, Bandwidth, IcpConfig,
    MetricRow, MmdEstimator, MotionSource, TemporalReport,
};
use u4d_core::{Result, RigidTransform, U4dError};

use crate::config::MetricSettings;

/// Length of the hand-crafted per-frame descriptor.
pub const FEATURE_DIM: usize = 16;

/// One sequence directory: frames in name order plus optional motion.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub name: String,
    pub frames: Vec<Vec<[f64; 3]>>,
    /// Unit-step motions, frame `i` to `i+1`.
    pub motion: Option<Vec<RigidTransform>>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| U4dError::Format(format!("{} line {}: {}", path.display(), i + 1, e)))?;
        let arr: [f64; 12] = vals
            .try_into()
            .map_err(|v: Vec<f64>| U4dError::Format(format!("{} line {}: expected 12 values, got {}", path.display(), i + 1, v.len())))?;
        out.push(RigidTransform::from_row_major(&arr));
    }
    Ok(out)
}

pub fn write_poses(path: &Path, motion: &[RigidTransform]) -> Result<()> {
    let mut s = String::new();
    for m in motion {
        let row: Vec<String> = m.to_row_major().iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Frame files (`*.bin`) of one sequence directory in name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "bin")).collect())
}

/// Every subdirectory of `root` holding at least one frame.
pub fn read_set(root: &Path) -> Result<Vec<SequenceDir>> {
    let mut out = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let paths = frame_paths(&dir)?;
        if paths.is_empty() {
            continue;
        }
        let frames = paths.iter().map(|p| read_point_bin(p).map(|c| c.xyz_f64())).collect::<Result<Vec<_>>>()?;
        let poses = dir.join("poses.csv");
        let motion = if poses.exists() { Some(read_poses(&poses)?) } else { None };
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(SequenceDir { name, frames, motion });
    }
    if out.is_empty() {
        return Err(U4dError::Input(format!("no sequences with frames under {}", root.display())));
    }
    Ok(out)
}

/// Per-frame descriptor: coordinate means and spreads, a range histogram,
/// the fraction of points above the sensor, and log point count.
pub fn frame_features(xyz: &[[f64; 3]], max_depth: f64) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    let n = xyz.len();
    if n == 0 {
        return f;
    }
    let nf = n as f64;
    for a in 0..3 {
        let mean = xyz.iter().map(|p| p[a]).sum::<f64>() / nf;
        let var = xyz.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / nf;
        f[a] = mean;
        f[3 + a] = var.sqrt();
    }
    for p in xyz {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let bin = ((r / max_depth * 8.0) as usize).min(7);
        f[6 + bin] += 1.0 / nf;
    }
    f[14] = xyz.iter().filter(|p| p[2] > 0.0).count() as f64 / nf;
    f[15] = (1.0 + nf).ln();
    f
}

fn all_frames(set: &[SequenceDir]) -> impl Iterator<Item = &Vec<[f64; 3]>> {
    set.iter().flat_map(|s| s.frames.iter())
}

fn feature_matrix(set: &[SequenceDir], max_depth: f64) -> Vec<f64> {
    all_frames(set).flat_map(|f| frame_features(f, max_depth)).collect()
}

fn frechet_row(metric: &str, a: &[f64], b: &[f64], dim: usize) -> Result<MetricRow> {
    let (ma, mb) = (feature_moments(a, dim)?, feature_moments(b, dim)?);
    Ok(MetricRow::new(metric, None, gaussian_frechet(&ma, &mb)?, ma.n + mb.n))
}

/// Either the computed row or a NaN row with `n = 0` when the metric is
/// undefined on these inputs.
fn or_undefined(metric: &str, interval: Option<usize>, r: Result<MetricRow>) -> Result<MetricRow> {
    match r {
        Ok(row) => Ok(row),
        Err(U4dError::UndefinedInput(_) | U4dError::InsufficientSamples(_) | U4dError::Degenerate(_)) => {
            Ok(MetricRow::new(metric, interval, f64::NAN, 0))
        }
        Err(e) => Err(e),
    }
}

fn pooled_bev(set: &[SequenceDir], m: &MetricSettings) -> Result<u4d_core::metrics::BevHistogram> {
    let pts: Vec<[f64; 3]> = all_frames(set).flat_map(|f| f.iter().copied()).collect();
    bev_histogram(&pts, m.bev_extent, m.bev_bins)
}

fn frame_bevs(set: &[SequenceDir], m: &MetricSettings) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for f in all_frames(set) {
        out.extend(bev_histogram(f, m.bev_extent, m.bev_bins)?.cells);
    }
    Ok(out)
}

/// Temporal metrics of `set`, measured against the motion in `reference`
/// (sequence `k` pairs with reference `k mod len`). Sequences whose frames
/// cannot be registered are skipped.
fn temporal(set: &[SequenceDir], reference: &[SequenceDir], interval: usize) -> Result<TemporalReport> {
    let mut acc = TemporalReport { interval, ttce_rot: 0.0, ttce_trans: 0.0, ctc: 0.0, pairs: 0 };
    for (k, seq) in set.iter().enumerate() {
        let motion = match (&seq.motion, &reference[k % reference.len()].motion) {
            (Some(m), _) | (None, Some(m)) => m,
            (None, None) => return Err(U4dError::Input(format!("no motion for sequence {}", seq.name))),
        };
        if seq.frames.iter().any(|f| f.len() < 3) {
            continue;
        }
        let reports = match temporal_consistency(&seq.frames, motion, &[interval], &MotionSource::Icp(IcpConfig::default())) {
            Ok(r) => r,
            Err(U4dError::Degenerate(_) | U4dError::InsufficientFrames(_)) => continue,
            Err(e) => return Err(e),
        };
        let r = &reports[0];
        let p = r.pairs as f64;
        acc.ttce_rot += r.ttce_rot * p;
        acc.ttce_trans += r.ttce_trans * p;
        acc.ctc += r.ctc * p;
        acc.pairs += r.pairs;
    }
    if acc.pairs > 0 {
        let p = acc.pairs as f64;
        acc.ttce_rot /= p;
        acc.ttce_trans /= p;
        acc.ctc /= p;
    } else {
        acc.ttce_rot = f64::NAN;
        acc.ttce_trans = f64::NAN;
        acc.ctc = f64::NAN;
    }
    Ok(acc)
}

/// Optional precomputed features for the range-image Fréchet row.
#[derive(Debug, Clone, Default)]
pub struct FeatureFiles {
    pub gen: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

pub fn evaluate(gen: &[SequenceDir], reference: &[SequenceDir], m: &MetricSettings, max_depth: f64, features: &FeatureFiles) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    if let (Some(a), Some(b)) = (&features.gen, &features.reference) {
        let (a, b) = (read_matrix(a)?, read_matrix(b)?);
        if a.cols != b.cols {
            return Err(U4dError::Shape(format!("feature dims {} and {} differ", a.cols, b.cols)));
        }
        let dim = a.cols;
        let a: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
        rows.push(or_undefined("FRD", None, frechet_row("FRD", &a, &b, dim))?);
    }
    let (fa, fb) = (feature_matrix(gen, max_depth), feature_matrix(reference, max_depth));
    rows.push(or_undefined("FPD", None, frechet_row("FPD", &fa, &fb, FEATURE_DIM))?);

    let n_pts = |s: &[SequenceDir]| all_frames(s).map(|f| f.len()).sum::<usize>();
    let j = pooled_bev(gen, m).and_then(|p| pooled_bev(reference, m).and_then(|q| jsd(&p, &q)));
    rows.push(or_undefined("JSD", None, j.map(|v| MetricRow::new("JSD", None, v, n_pts(gen) + n_pts(reference))))?);

    let dim = m.bev_bins * m.bev_bins;
    let (ba, bb) = (frame_bevs(gen, m)?, frame_bevs(reference, m)?);
    let v = mmd(&ba, &bb, dim, Bandwidth::Median, MmdEstimator::Unbiased);
    rows.push(or_undefined("MMD", None, v.map(|v| MetricRow::new("MMD", None, v, (ba.len() + bb.len()) / dim)))?);

    for &k in &m.intervals {
        let g = temporal(gen, reference, k)?;
        let r = temporal(reference, reference, k)?;
        rows.push(MetricRow::new("TTCE_rot", Some(k), g.ttce_rot, g.pairs));
        rows.push(MetricRow::new("TTCE_trans", Some(k), g.ttce_trans, g.pairs));
        rows.push(MetricRow::new("CTC", Some(k), g.ctc, g.pairs));
        rows.push(MetricRow::new("CTC_gap", Some(k), g.ctc - r.ctc, g.pairs.min(r.pairs)));
    }
    Ok(rows)
}
