//! Distribution-level fidelity: Gaussian Fréchet distance on features, BEV
//! occupancy histograms with Jensen–Shannon divergence, and kernel MMD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{bail, Result};

/// Sample mean and covariance (divisor `N−1`) of `N×D` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureMoments {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Moments of row-major `N×dim` features.
pub fn feature_moments(data: &[f64], dim: usize) -> Result<FeatureMoments> {
    if dim == 0 || data.len() % dim != 0 {
        bail!(Shape, "{} values do not form rows of {}", data.len(), dim);
    }
    let n = data.len() / dim;
    if n < 2 {
        bail!(InsufficientSamples, "covariance needs at least 2 rows, got {}", n);
    }
    let mut mu = DVector::zeros(dim);
    for row in data.chunks_exact(dim) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(dim, dim);
    for row in data.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - mu[i];
            for j in i..dim {
                sigma[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    sigma /= (n - 1) as f64;
    for i in 0..dim {
        for j in 0..i {
            sigma[(i, j)] = sigma[(j, i)];
        }
    }
    Ok(FeatureMoments { mu, sigma, n })
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, clamped at 0.
///
/// The trace of `(ΣaΣb)^{1/2}` is taken from the symmetric similar matrix
/// `√Σa Σb √Σa`.
pub fn gaussian_frechet(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        bail!(Shape, "feature dimensions differ: {} vs {}", a.dim(), b.dim());
    }
    if a.mu == b.mu && a.sigma == b.sigma {
        return Ok(0.0);
    }
    let diff = &a.mu - &b.mu;
    let sa = psd_sqrt(&a.sigma);
    let inner = &sa * &b.sigma * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff.dot(&diff) + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Normalized `bins×bins` top-down occupancy over `[−extent, extent]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevHistogram {
    pub bins: usize,
    pub extent: f64,
    /// Row-major, `y` rows by `x` columns.
    pub cells: Vec<f64>,
    pub count: usize,
}

impl BevHistogram {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn bin_size(&self) -> f64 {
        2.0 * self.extent / self.bins as f64
    }
}

pub fn bev_histogram(xyz: &[[f64; 3]], extent: f64, bins: usize) -> Result<BevHistogram> {
    if !(extent > 0.0) || bins == 0 {
        bail!(Config, "BEV grid needs extent > 0 and bins >= 1, got {} and {}", extent, bins);
    }
    let mut cells = vec![0.0; bins * bins];
    let mut count = 0usize;
    let scale = bins as f64 / (2.0 * extent);
    for p in xyz {
        if !(p[0].abs() < extent && p[1].abs() < extent) {
            continue;
        }
        let ix = (((p[0] + extent) * scale) as usize).min(bins - 1);
        let iy = (((p[1] + extent) * scale) as usize).min(bins - 1);
        cells[iy * bins + ix] += 1.0;
        count += 1;
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        cells.iter_mut().for_each(|c| *c *= inv);
    }
    Ok(BevHistogram { bins, extent, cells, count })
}

/// Natural-log Jensen–Shannon divergence of two distributions.
pub fn jsd_distributions(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        bail!(Shape, "distributions of length {} and {}", p.len(), q.len());
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0) || !(sq > 0.0) {
        bail!(UndefinedInput, "divergence of an empty distribution");
    }
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            acc += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            acc += 0.5 * b * (b / m).ln();
        }
    }
    Ok(acc.clamp(0.0, std::f64::consts::LN_2))
}

pub fn jsd(p: &BevHistogram, q: &BevHistogram) -> Result<f64> {
    if p.bins != q.bins || p.extent != q.extent {
        bail!(Shape, "BEV grids differ: {}x{} over {} m vs {}x{} over {} m", p.bins, p.bins, p.extent, q.bins, q.bins, q.extent);
    }
    if p.is_empty() || q.is_empty() {
        bail!(UndefinedInput, "JSD of an empty BEV histogram");
    }
    jsd_distributions(&p.cells, &q.cells)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdEstimator {
    Unbiased,
    Biased,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance of the pooled rows.
pub fn median_distance(rows: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Squared MMD between row-major samples with a Gaussian RBF kernel.
pub fn mmd(x: &[f64], y: &[f64], dim: usize, bandwidth: Bandwidth, estimator: MmdEstimator) -> Result<f64> {
    if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
        bail!(Shape, "MMD inputs do not form rows of {}", dim);
    }
    let xs: Vec<&[f64]> = x.chunks_exact(dim).collect();
    let ys: Vec<&[f64]> = y.chunks_exact(dim).collect();
    if xs.is_empty() || ys.is_empty() {
        bail!(UndefinedInput, "MMD needs nonempty samples");
    }
    if estimator == MmdEstimator::Unbiased && (xs.len() < 2 || ys.len() < 2) {
        bail!(InsufficientSamples, "unbiased MMD needs at least 2 samples per side");
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => bail!(Config, "RBF bandwidth must be positive, got {}", s),
        Bandwidth::Median => {
            let pooled: Vec<&[f64]> = xs.iter().chain(&ys).copied().collect();
            let m = median_distance(&pooled);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let g = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-g * sq_dist(a, b)).exp();
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j || estimator == MmdEstimator::Biased {
                    acc += k(s[i], s[j]);
                }
            }
        }
        let n = s.len() as f64;
        match estimator {
            MmdEstimator::Unbiased => acc / (n * (n - 1.0)),
            MmdEstimator::Biased => acc / (n * n),
        }
    };
    let mut cross = 0.0;
    for a in &xs {
        for b in &ys {
            cross += k(a, b);
        }
    }
    cross /= (xs.len() * ys.len()) as f64;
    Ok(within(&xs) + within(&ys) - 2.0 * cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn moments_1d(mu: f64, var: f64) -> FeatureMoments {
        FeatureMoments { mu: DVector::from_element(1, mu), sigma: DMatrix::from_element(1, 1, var), n: 2 }
    }

    #[test]
    fn frechet_closed_forms() {
        let d = gaussian_frechet(&moments_1d(0.0, 1.0), &moments_1d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-10);
        // (μa−μb)² + (σa − σb)²
        let d = gaussian_frechet(&moments_1d(0.5, 4.0), &moments_1d(-1.0, 9.0)).unwrap();
        assert!((d - (2.25 + 1.0)).abs() < 1e-10);
        let m = feature_moments(&[1.0, 2.0, 3.0, 5.0, -1.0, 0.0], 2).unwrap();
        assert!(gaussian_frechet(&m, &m).unwrap().abs() < 1e-12);
        assert!(gaussian_frechet(&m, &moments_1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn moments_basics() {
        let m = feature_moments(&[2.0, 3.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(m.mu.as_slice(), &[2.0, 3.0]);
        assert!(m.sigma.iter().all(|v| *v == 0.0));
        assert!(matches!(feature_moments(&[1.0, 2.0], 2), Err(crate::U4dError::InsufficientSamples(_))));
        let mut r = rng_from_seed(3);
        let data: Vec<f64> = (0..200_000).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let m = feature_moments(&data, 2).unwrap();
        assert!(m.mu.amax() < 0.02);
        assert!((m.sigma.clone() - DMatrix::identity(2, 2)).amax() < 0.02);
        let rows: Vec<&[f64]> = data.chunks(2).collect();
        let mut rev = Vec::new();
        for r in rows.iter().rev() {
            rev.extend_from_slice(r);
        }
        let m2 = feature_moments(&rev, 2).unwrap();
        assert!((m.mu - m2.mu).amax() < 1e-12 && (m.sigma - m2.sigma).amax() < 1e-12);
    }

    #[test]
    fn histogram_and_jsd_cases() {
        let h = bev_histogram(&[[0.1, 0.1, 0.0]], 80.0, 100).unwrap();
        assert_eq!(h.cells.iter().filter(|c| **c == 1.0).count(), 1);
        let empty = bev_histogram(&[[100.0, 0.0, 0.0]], 80.0, 100).unwrap();
        assert!(empty.is_empty() && empty.cells.iter().all(|c| *c == 0.0));
        let four = bev_histogram(&[[-1.5, -1.5, 0.0], [1.5, -1.5, 0.0], [-1.5, 1.5, 0.0], [1.5, 1.5, 0.0]], 2.0, 2).unwrap();
        assert_eq!(four.cells, vec![0.25; 4]);
        assert!(matches!(jsd(&h, &empty), Err(crate::U4dError::UndefinedInput(_))));
        assert_eq!(jsd(&four, &four).unwrap(), 0.0);
        let a = bev_histogram(&[[-1.5, -1.5, 0.0]], 2.0, 2).unwrap();
        let b = bev_histogram(&[[1.5, 1.5, 0.0]], 2.0, 2).unwrap();
        assert!((jsd(&a, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let v = jsd_distributions(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - 0.2157).abs() < 1e-4);
        assert!((v - jsd_distributions(&[1.0, 0.0], &[0.5, 0.5]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn mmd_behaviour() {
        let mut r = rng_from_seed(4);
        let mut draw = |n: usize, shift: f64| -> Vec<f64> { (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal) + shift).collect() };
        let x = draw(500, 0.0);
        let y = draw(500, 0.0);
        let z = draw(500, 3.0);
        assert!(mmd(&x, &x, 2, Bandwidth::Median, MmdEstimator::Biased).unwrap().abs() < 1e-12);
        assert!(mmd(&x, &y, 2, Bandwidth::Median, MmdEstimator::Unbiased).unwrap().abs() < 0.01);
        assert!(mmd(&x, &z, 2, Bandwidth::Median, MmdEstimator::Unbiased).unwrap() > 0.1);
        assert!(matches!(mmd(&x[..2], &y, 2, Bandwidth::Median, MmdEstimator::Unbiased), Err(crate::U4dError::InsufficientSamples(_))));
        assert!(mmd(&x, &y, 2, Bandwidth::Fixed(0.0), MmdEstimator::Biased).is_err());
    }
}
