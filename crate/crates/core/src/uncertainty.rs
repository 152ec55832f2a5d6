//! Per-point semantic uncertainty from segmentation logits, top-K selection
//! and the sparse range view of the selected points.

use std::cmp::Ordering;

use crate::cloud::PointCloud;
use crate::error::{bail, Result};
use crate::geometry::{project_points, RangeImage, SensorConfig};
use crate::scalar::Real;

/// Softmax probabilities and Shannon entropy (nats) per point.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyField<T> {
    pub classes: usize,
    pub probs: Vec<T>,
    pub entropy: Vec<T>,
}

impl<T: Real> UncertaintyField<T> {
    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }

    pub fn probs_of(&self, i: usize) -> &[T] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }
}

/// Max-shifted softmax of one row, written into `out`.
pub fn softmax_row<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `−Σ p log p` with `0·log 0 = 0`.
pub fn shannon_entropy<T: Real>(probs: &[T]) -> T {
    probs
        .iter()
        .filter(|p| **p > T::zero())
        .fold(T::zero(), |acc, &p| acc - p * p.ln())
}

/// Entropy of row-major `N×C` logits.
pub fn entropy_map<T: Real>(logits: &[T], classes: usize) -> Result<UncertaintyField<T>> {
    if classes < 2 {
        bail!(Input, "need at least 2 classes, got {}", classes);
    }
    if logits.len() % classes != 0 {
        bail!(Shape, "{} logits do not split into rows of {}", logits.len(), classes);
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        bail!(Input, "non-finite logit at point {}", i / classes);
    }
    let n = logits.len() / classes;
    let mut probs = vec![T::zero(); logits.len()];
    let mut entropy = Vec::with_capacity(n);
    for (row, out) in logits.chunks_exact(classes).zip(probs.chunks_exact_mut(classes)) {
        softmax_row(row, out);
        entropy.push(shannon_entropy(out));
    }
    Ok(UncertaintyField { classes, probs, entropy })
}

pub fn topk_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).min(n)
}

/// Indices of the `⌈ratio·N⌉` highest scores, ties broken toward the smaller
/// index. Returned in ascending index order.
pub fn select_topk<T: Real>(scores: &[T], ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        bail!(Config, "top-k ratio must lie in (0, 1], got {}", ratio);
    }
    if scores.is_empty() {
        bail!(Input, "top-k selection needs at least one point");
    }
    let k = topk_count(scores.len(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Range view of the selected subset only.
pub fn build_uncertainty_view<T: Real>(cloud: &PointCloud<T>, selected: &[usize], cfg: &SensorConfig) -> Result<RangeImage<T>> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= cloud.len()) {
        bail!(Input, "index {} out of range for a cloud of {} points", bad, cloud.len());
    }
    Ok(project_points(&cloud.subset(selected), cfg).0)
}

/// Entropy → top-K → sparse view for one frame.
pub fn uncertainty_view_from_logits<T: Real>(
    cloud: &PointCloud<T>,
    logits: &[T],
    classes: usize,
    ratio: f64,
    cfg: &SensorConfig,
) -> Result<(RangeImage<T>, Vec<usize>)> {
    let field = entropy_map(logits, classes)?;
    if field.len() != cloud.len() {
        bail!(Alignment, "{} logit rows for {} points", field.len(), cloud.len());
    }
    let selected = select_topk(&field.entropy, ratio)?;
    let view = build_uncertainty_view(cloud, &selected, cfg)?;
    Ok((view, selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use proptest::prelude::*;

    #[test]
    fn uniform_and_one_hot() {
        let f = entropy_map(&[0.0f64; 4], 4).unwrap();
        assert!((f.entropy[0] - 4f64.ln()).abs() < 1e-15);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
        assert_eq!(shannon_entropy(&[1.0f64, 0.0, 0.0]), 0.0);
        let f = entropy_map(&[1000.0f64, 0.0, 0.0], 3).unwrap();
        assert!(f.entropy[0].abs() < 1e-300);
    }

    #[test]
    fn two_class_value() {
        // −(0.7 ln 0.7 + 0.3 ln 0.3)
        let h = shannon_entropy(&[0.7f64, 0.3]);
        assert!((h - 0.6108643020548935).abs() < 1e-15);
        assert!((h - 0.6109).abs() < 1e-4);
        let logits = [0.7f64.ln(), 0.3f64.ln()];
        assert!((entropy_map(&logits, 2).unwrap().entropy[0] - h).abs() < 1e-15);
    }

    #[test]
    fn entropy_input_errors() {
        assert!(entropy_map(&[0.0f64; 3], 1).is_err());
        assert!(entropy_map(&[0.0f64, f64::NAN], 2).is_err());
        assert!(entropy_map(&[0.0f64; 3], 2).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.5f64; 10], 0.3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_topk(&[0.1f64, 0.9, 0.5], 1.0 / 3.0).unwrap(), vec![1]);
        assert_eq!(select_topk(&[0.1f64; 7], 0.2).unwrap().len(), 2);
        assert_eq!(topk_count(1000, 0.2), 200);
        assert_eq!(topk_count(1001, 0.2), 201);
        assert_eq!(topk_count(10, 1.0), 10);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(select_topk(&[1.0f64], bad), Err(crate::U4dError::Config(_))));
        }
        assert!(select_topk::<f64>(&[], 0.5).is_err());
    }

    fn ring_cloud(n: usize) -> PointCloud<f64> {
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let a = i as f64 * 0.37;
                    let r = 5.0 + (i % 7) as f64;
                    Point::new(r * a.cos(), r * a.sin(), -1.0 + 0.1 * (i % 5) as f64, 0.5)
                })
                .collect(),
        )
    }

    #[test]
    fn view_of_all_points_equals_full_projection() {
        let cfg = SensorConfig::toy(16, 64);
        let cloud = ring_cloud(200);
        let all: Vec<usize> = (0..cloud.len()).collect();
        assert_eq!(build_uncertainty_view(&cloud, &all, &cfg).unwrap(), project_points(&cloud, &cfg).0);
        assert_eq!(build_uncertainty_view(&cloud, &[], &cfg).unwrap().valid_count(), 0);
        assert!(build_uncertainty_view(&cloud, &[200], &cfg).is_err());
    }

    proptest! {
        #[test]
        fn entropy_shift_and_permutation_invariant(row in proptest::collection::vec(-20.0f64..20.0, 2..8), shift in -50.0f64..50.0, rot in 0usize..8) {
            let c = row.len();
            let base = entropy_map(&row, c).unwrap().entropy[0];
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            prop_assert!((entropy_map(&shifted, c).unwrap().entropy[0] - base).abs() <= 1e-9);
            let mut permuted = row.clone();
            permuted.rotate_left(rot % c);
            prop_assert!((entropy_map(&permuted, c).unwrap().entropy[0] - base).abs() <= 1e-12);
            prop_assert!(base >= 0.0 && base <= (c as f64).ln() + 1e-12);
            let f = entropy_map(&row, c).unwrap();
            prop_assert!((f.probs_of(0).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn topk_dominates_and_survives_monotone_maps(scores in proptest::collection::vec(0.0f64..2.0, 1..60), ratio in 0.01f64..=1.0) {
            let sel = select_topk(&scores, ratio).unwrap();
            prop_assert_eq!(sel.len(), topk_count(scores.len(), ratio));
            let min_sel = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in 0..scores.len() {
                if !sel.contains(&i) {
                    prop_assert!(scores[i] <= min_sel);
                }
            }
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(select_topk(&mapped, ratio).unwrap(), sel);
        }

        #[test]
        fn sparse_view_is_subset_of_full(n in 5usize..300, ratio in 0.05f64..=1.0, seed in 0u64..1000) {
            let cfg = SensorConfig::toy(16, 64);
            let cloud = ring_cloud(n);
            let scores: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1009) as f64).collect();
            let sel = select_topk(&scores, ratio).unwrap();
            let view = build_uncertainty_view(&cloud, &sel, &cfg).unwrap();
            let full = project_points(&cloud, &cfg).0;
            prop_assert!(view.valid_count() <= sel.len());
            prop_assert!(view.valid_count() <= full.valid_count());
            for (a, b) in view.mask.iter().zip(&full.mask) {
                prop_assert!(!a || *b);
            }
        }
    }
}
