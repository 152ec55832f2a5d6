//! Segmentation quality and calibration.

use crate::error::{bail, Result};

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// `Σ_m (|B_m|/N)·|acc(B_m) − conf(B_m)|` over `bins` equal-width,
/// right-closed bins on `[0, 1]`; the first bin also holds 0. Evaluated as
/// `Σ_m |hits_m − Σ conf| / N` with compensated sums.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if bins == 0 {
        bail!(Config, "ECE needs at least one bin");
    }
    if confidences.len() != correct.len() {
        bail!(Alignment, "{} confidences for {} outcomes", confidences.len(), correct.len());
    }
    if confidences.is_empty() {
        bail!(InsufficientSamples, "ECE of an empty sample");
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![Neumaier::default(); bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            bail!(Input, "confidence {} outside [0, 1]", c);
        }
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b].add(c);
        hits[b] += ok as usize;
    }
    let mut total = Neumaier::default();
    for b in (0..bins).filter(|&b| count[b] > 0) {
        total.add((hits[b] as f64 - conf[b].value()).abs());
    }
    Ok(total.value() / confidences.len() as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Per-class `(TP, TP+FP+FN)`; `None` for classes absent from both labelings.
pub fn class_counts(pred: &[usize], gt: &[usize], classes: usize) -> Result<Vec<Option<(usize, usize)>>> {
    if pred.len() != gt.len() {
        bail!(Alignment, "{} predictions for {} labels", pred.len(), gt.len());
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= classes || g >= classes {
            bail!(Input, "class id {} outside [0, {})", p.max(g), classes);
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then_some((tp[c], denom))
        })
        .collect())
}

pub fn class_iou(pred: &[usize], gt: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(class_counts(pred, gt, classes)?.into_iter().map(|c| c.map(|(t, d)| t as f64 / d as f64)).collect())
}

/// Mean IoU over classes present in either labeling. The mean is formed as
/// an exact fraction when it fits in 128 bits, so it is correctly rounded.
pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    let present: Vec<(usize, usize)> = class_counts(pred, gt, classes)?.into_iter().flatten().collect();
    if present.is_empty() {
        bail!(UndefinedInput, "mIoU of an empty labeling");
    }
    let k = present.len() as u128;
    let exact = present.iter().try_fold((0u128, 1u128), |(n, d), &(t, c)| {
        let (t, c) = (t as u128, c as u128);
        let g = gcd(d, c);
        let den = (d / g).checked_mul(c)?;
        let num = n.checked_mul(c / g)?.checked_add(t.checked_mul(d / g)?)?;
        let r = gcd(num, den).max(1);
        Some((num / r, den / r))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(k)?))) {
        Some((n, d)) if n < (1u128 << 53) && d < (1u128 << 53) => Ok(n as f64 / d as f64),
        _ => Ok(present.iter().map(|&(t, c)| t as f64 / c as f64).sum::<f64>() / k as f64),
    }
}
