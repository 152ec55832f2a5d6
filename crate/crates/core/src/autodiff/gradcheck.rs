//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors of near-zero gradients.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(parameter, coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
}

/// Compare `backward()` against `(f(p+h) − f(p−h)) / 2h` for every
/// coordinate of every parameter. `f` must be deterministic.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_subset(params, step, usize::MAX, f)
}

/// As [`finite_diff_check`], probing at most `max_coords` evenly strided
/// coordinates per parameter.
pub fn finite_diff_check_subset<F>(params: &[Tensor<f64>], step: f64, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0, worst: (0, 0), coordinates_checked: 0 };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for ci in (0..n).step_by(stride) {
            let orig = p.data()[ci];
            probe[pi].data_mut()[ci] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates_checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}
