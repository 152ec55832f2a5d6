//! The MoST block and the U-Net denoiser assembled from it.
//!
//! A block splits its input into a spatial (`1×3×3`) and a temporal (`3×1×1`)
//! branch, mixes both through a shared two-layer MLP, and fuses the branches
//! with a per-position softmax gate. During training the gate logits carry a
//! softplus-scaled Gaussian perturbation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gate weights as plain tensors, `1×L×H×W` each.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    pub alpha_s: Tensor<T>,
    pub alpha_t: Tensor<T>,
}

impl<T: Real> GateState<T> {
    pub fn mean_spatial(&self) -> f64 {
        mean_f64(self.alpha_s.data())
    }

    pub fn mean_temporal(&self) -> f64 {
        mean_f64(self.alpha_t.data())
    }
}

fn mean_f64<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.f64()).sum::<f64>() / v.len().max(1) as f64
}

/// Gate weights as tape nodes, tagged with their position in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateVars {
    pub alpha_s: Var,
    pub alpha_t: Var,
    pub level: usize,
    pub block: usize,
}

impl GateVars {
    pub fn state<T: Real>(&self, tape: &Tape<T>) -> GateState<T> {
        GateState { alpha_s: tape.value(self.alpha_s).clone(), alpha_t: tape.value(self.alpha_t).clone() }
    }
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MoSTVars {
    pub ws: Var,
    pub bs: Var,
    pub wt: Var,
    pub bt: Var,
    pub m1w: Var,
    pub m1b: Var,
    pub m2w: Var,
    pub m2b: Var,
    pub wg: Var,
    pub bg: Var,
    pub wz: Var,
}

impl MoSTVars {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |k: &str| bound.var(&format!("{prefix}.{k}"));
        Ok(Self {
            ws: v("ws")?,
            bs: v("bs")?,
            wt: v("wt")?,
            bt: v("bt")?,
            m1w: v("m1w")?,
            m1b: v("m1b")?,
            m2w: v("m2w")?,
            m2b: v("m2b")?,
            wg: v("wg")?,
            bg: v("bg")?,
            wz: v("wz")?,
        })
    }
}

/// Shapes of one block's parameters, in insertion order.
pub fn most_param_shapes(c_in: usize, c_out: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("ws", vec![c_out, c_in, 1, 3, 3]),
        ("bs", vec![c_out]),
        ("wt", vec![c_out, c_in, 3, 1, 1]),
        ("bt", vec![c_out]),
        ("m1w", vec![2 * c_out, c_out]),
        ("m1b", vec![c_out]),
        ("m2w", vec![c_out, c_out]),
        ("m2b", vec![c_out]),
        ("wg", vec![c_out, 2]),
        ("bg", vec![2]),
        ("wz", vec![c_out, 2]),
    ]
}

/// Random block parameters under `prefix`.
pub fn init_most<T: Real, R: Rng>(params: &mut ParamSet<T>, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) {
    for (name, shape) in most_param_shapes(c_in, c_out) {
        let t = match name {
            "ws" => Tensor::randn(&shape, (1.0 / (9 * c_in) as f64).sqrt(), rng),
            "wt" => Tensor::randn(&shape, (1.0 / (3 * c_in) as f64).sqrt(), rng),
            "m1w" | "m2w" | "wg" | "wz" => Tensor::randn(&shape, (1.0 / shape[0] as f64).sqrt(), rng),
            _ => Tensor::zeros(&shape),
        };
        params.insert(format!("{prefix}.{name}"), t);
    }
}

/// `softmax(F·W_g + b_g + χ ⊙ softplus(F·W_z))` over the two experts at each
/// position; `χ` only in train mode.
pub fn noisy_gate<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    f_share: Var,
    wg: Var,
    bg: Var,
    wz: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let c = tape.value(f_share).channels();
    if tape.shape(wg) != [c, 2] || tape.shape(wz) != [c, 2] {
        bail!(Shape, "gate weights {:?}/{:?} for {} channels", tape.shape(wg), tape.shape(wz), c);
    }
    let mut logits = tape.channel_mix(f_share, wg, bg)?;
    if mode == Mode::Train {
        let zero_bias = tape.constant(Tensor::zeros(&[2]));
        let z = tape.channel_mix(f_share, wz, zero_bias)?;
        let scale = tape.softplus(z);
        let chi = tape.constant(Tensor::randn(tape.shape(scale), 1.0, rng));
        let noise = tape.mul(chi, scale)?;
        logits = tape.add(logits, noise)?;
    }
    let alpha = tape.softmax_channels(logits);
    Ok((tape.select_channel(alpha, 0)?, tape.select_channel(alpha, 1)?))
}

/// One MoST block; returns the fused features and the gate nodes.
pub fn most_block<T: Real, R: Rng>(tape: &mut Tape<T>, x: Var, p: &MoSTVars, mode: Mode, rng: &mut R) -> Result<(Var, Var, Var)> {
    let c_in = tape.value(x).channels();
    let c_out = tape.shape(p.ws)[0];
    if tape.shape(x).len() != 4 || tape.shape(p.ws)[1] != c_in {
        bail!(Shape, "block expects {} input channels, got {:?}", tape.shape(p.ws)[1], tape.shape(x));
    }
    let a = tape.silu(x);
    let fs = tape.conv_spatial(a, p.ws, p.bs, 1)?;
    let ft = tape.conv_temporal(a, p.wt, p.bt)?;
    let cat = tape.concat(fs, ft)?;
    let h = tape.channel_mix(cat, p.m1w, p.m1b)?;
    let h = tape.softplus(h);
    let share = tape.channel_mix(h, p.m2w, p.m2b)?;
    let (alpha_s, alpha_t) = noisy_gate(tape, share, p.wg, p.bg, p.wz, mode, rng)?;
    let s = tape.mul_broadcast(alpha_s, fs)?;
    let t = tape.mul_broadcast(alpha_t, ft)?;
    let mut out = tape.add(s, t)?;
    if c_in == c_out {
        out = tape.add(out, x)?;
    }
    Ok((out, alpha_s, alpha_t))
}

/// `Σ cv²(αˢ) + cv²(αᵗ)` over gate states, population variance.
pub fn gate_regularization<T: Real>(gates: &[GateState<T>]) -> T {
    gates.iter().fold(T::zero(), |acc, g| {
        let (ms, vs) = crate::autodiff::moments(g.alpha_s.data());
        let (mt, vt) = crate::autodiff::moments(g.alpha_t.data());
        acc + vs / (ms * ms) + vt / (mt * mt)
    })
}

/// Differentiable [`gate_regularization`].
pub fn gate_regularization_on_tape<T: Real>(tape: &mut Tape<T>, gates: &[GateVars]) -> Result<Var> {
    if gates.is_empty() {
        bail!(Usage, "gate regularization over an empty gate set");
    }
    let mut total: Option<Var> = None;
    for g in gates {
        let s = tape.cv_squared(g.alpha_s);
        let t = tape.cv_squared(g.alpha_t);
        let pair = tape.add(s, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    Ok(total.unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub dims: Vec<usize>,
    pub blocks_per_level: usize,
    pub in_channels: usize,
    pub cond_channels: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    /// Four levels of 64/128/256/512 channels, three blocks each.
    pub fn paper(cond_channels: usize) -> Self {
        Self { dims: vec![64, 128, 256, 512], blocks_per_level: 3, in_channels: 2, cond_channels, time_dim: 64 }
    }

    pub fn toy(cond_channels: usize) -> Self {
        Self { dims: vec![8, 16], blocks_per_level: 1, in_channels: 2, cond_channels, time_dim: 16 }
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            bail!(Config, "denoiser dims must be nonempty and positive, got {:?}", self.dims);
        }
        if self.blocks_per_level == 0 || self.in_channels == 0 {
            bail!(Config, "blocks per level and input channels must be positive");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            bail!(Config, "time embedding dim must be even and at least 2, got {}", self.time_dim);
        }
        Ok(())
    }

    /// Spatial extents must survive `levels − 1` halvings.
    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << (self.levels() - 1);
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            bail!(Config, "range image {}x{} not divisible by {}", height, width, f);
        }
        Ok(())
    }

    /// Every parameter name and shape in build order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let d = &self.dims;
        let td = self.time_dim;
        let conv = |ci: usize, co: usize| vec![co, ci, 1, 3, 3];
        out.push(("time.w1".into(), vec![td, td]));
        out.push(("time.b1".into(), vec![td]));
        out.push(("time.w2".into(), vec![td, td]));
        out.push(("time.b2".into(), vec![td]));
        out.push(("stem.w".into(), conv(self.in_channels + self.cond_channels, d[0])));
        out.push(("stem.b".into(), vec![d[0]]));
        let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, ci: usize, co: usize| {
            for (k, s) in most_param_shapes(ci, co) {
                out.push((format!("{prefix}.{k}"), s));
            }
        };
        for (l, &c) in d.iter().enumerate() {
            if l > 0 {
                out.push((format!("enc{l}.down.w"), conv(d[l - 1], c)));
                out.push((format!("enc{l}.down.b"), vec![c]));
            }
            out.push((format!("enc{l}.temb.w"), vec![td, c]));
            out.push((format!("enc{l}.temb.b"), vec![c]));
            for b in 0..self.blocks_per_level {
                block(&mut out, format!("enc{l}.b{b}"), c, c);
            }
        }
        for l in (0..d.len() - 1).rev() {
            out.push((format!("dec{l}.temb.w"), vec![td, d[l]]));
            out.push((format!("dec{l}.temb.b"), vec![d[l]]));
            for b in 0..self.blocks_per_level {
                let ci = if b == 0 { d[l + 1] + d[l] } else { d[l] };
                block(&mut out, format!("dec{l}.b{b}"), ci, d[l]);
            }
        }
        out.push(("head.eps.w".into(), conv(d[0], self.in_channels)));
        out.push(("head.eps.b".into(), vec![self.in_channels]));
        out.push(("head.mask.w".into(), conv(d[0], 1)));
        out.push(("head.mask.b".into(), vec![1]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Random initial parameters for `cfg`.
pub fn build_denoiser<T: Real, R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in cfg.layout() {
        let leaf = name.rsplit('.').next().unwrap_or("");
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let t = if name.starts_with("head.eps") {
            Tensor::zeros(&shape)
        } else if shape.len() == 5 {
            Tensor::randn(&shape, (1.0 / fan_in as f64).sqrt(), rng)
        } else if shape.len() == 2 && leaf != "bg" {
            Tensor::randn(&shape, (1.0 / shape[0] as f64).sqrt(), rng)
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Sinusoidal features of `t ∈ [0,1]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Var,
    pub mask_logits: Var,
    pub gates: Vec<GateVars>,
}

/// One forward pass on a single `C×L×H×W` sample.
pub fn denoiser_forward<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &DenoiserConfig,
    x_t: Var,
    t: f64,
    cond: Option<Var>,
    mode: Mode,
    rng: &mut R,
) -> Result<DenoiserOutput> {
    if !(0.0..=1.0).contains(&t) {
        bail!(Domain, "diffusion time {} outside [0, 1]", t);
    }
    let xs = tape.shape(x_t).to_vec();
    if xs.len() != 4 || xs[0] != cfg.in_channels {
        bail!(Shape, "denoiser input {:?}, expected {} channels", xs, cfg.in_channels);
    }
    cfg.check_dims(xs[2], xs[3])?;
    let input = if cfg.cond_channels > 0 {
        let c = match cond {
            Some(c) => {
                let cs = tape.shape(c);
                if cs[0] != cfg.cond_channels || cs[1..] != xs[1..] {
                    bail!(Shape, "conditioning {:?} for input {:?}", cs, xs);
                }
                c
            }
            None => tape.constant(Tensor::zeros(&[cfg.cond_channels, xs[1], xs[2], xs[3]])),
        };
        tape.concat(x_t, c)?
    } else {
        if cond.is_some() {
            bail!(Usage, "conditioning passed to an unconditional denoiser");
        }
        x_t
    };

    let emb: Vec<T> = time_embedding(t, cfg.time_dim).into_iter().map(T::c).collect();
    let emb = tape.constant(Tensor::new(&[cfg.time_dim], emb)?);
    let e = tape.dense(emb, bound.var("time.w1")?, bound.var("time.b1")?)?;
    let e = tape.softplus(e);
    let temb = tape.dense(e, bound.var("time.w2")?, bound.var("time.b2")?)?;
    let add_time = |tape: &mut Tape<T>, h: Var, prefix: &str| -> Result<Var> {
        let proj = tape.dense(temb, bound.var(&format!("{prefix}.temb.w"))?, bound.var(&format!("{prefix}.temb.b"))?)?;
        tape.add_channel_bias(h, proj)
    };

    let mut gates = Vec::new();
    let mut h = tape.conv_spatial(input, bound.var("stem.w")?, bound.var("stem.b")?, 1)?;
    let mut skips = Vec::new();
    let levels = cfg.levels();
    for l in 0..levels {
        if l > 0 {
            h = tape.conv_spatial(h, bound.var(&format!("enc{l}.down.w"))?, bound.var(&format!("enc{l}.down.b"))?, 2)?;
        }
        h = add_time(tape, h, &format!("enc{l}"))?;
        for b in 0..cfg.blocks_per_level {
            let p = MoSTVars::bind(bound, &format!("enc{l}.b{b}"))?;
            let (o, alpha_s, alpha_t) = most_block(tape, h, &p, mode, rng)?;
            gates.push(GateVars { alpha_s, alpha_t, level: l, block: b });
            h = o;
        }
        if l + 1 < levels {
            skips.push(h);
        }
    }
    for l in (0..levels - 1).rev() {
        let up = tape.upsample2(h)?;
        h = tape.concat(up, skips[l])?;
        for b in 0..cfg.blocks_per_level {
            let p = MoSTVars::bind(bound, &format!("dec{l}.b{b}"))?;
            let (o, alpha_s, alpha_t) = most_block(tape, h, &p, mode, rng)?;
            gates.push(GateVars { alpha_s, alpha_t, level: 2 * levels - 2 - l, block: b });
            h = o;
            if b == 0 {
                h = add_time(tape, h, &format!("dec{l}"))?;
            }
        }
    }
    let a = tape.silu(h);
    let eps = tape.conv_spatial(a, bound.var("head.eps.w")?, bound.var("head.eps.b")?, 1)?;
    let mask_logits = tape.conv_spatial(a, bound.var("head.mask.w")?, bound.var("head.mask.b")?, 1)?;
    Ok(DenoiserOutput { eps, mask_logits, gates })
}

/// Forward outputs as plain tensors.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub eps: Tensor<T>,
    pub mask_logits: Tensor<T>,
    pub gates: Vec<(usize, usize, GateState<T>)>,
}

/// Forward pass without gradients.
pub fn predict<T: Real, R: Rng>(
    params: &ParamSet<T>,
    cfg: &DenoiserConfig,
    x_t: &Tensor<T>,
    t: f64,
    cond: Option<&Tensor<T>>,
    mode: Mode,
    rng: &mut R,
) -> Result<Prediction<T>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(x_t.clone());
    let c = cond.map(|c| tape.constant(c.clone()));
    let out = denoiser_forward(&mut tape, &bound, cfg, x, t, c, mode, rng)?;
    Ok(Prediction {
        eps: tape.value(out.eps).clone(),
        mask_logits: tape.value(out.mask_logits).clone(),
        gates: out.gates.iter().map(|g| (g.level, g.block, g.state(&tape))).collect(),
    })
}

/// Gate telemetry as CSV rows `level,block,mean_alpha_s,mean_alpha_t`.
pub fn gate_telemetry_csv<T: Real>(gates: &[(usize, usize, GateState<T>)]) -> String {
    let mut s = String::from("level,block,mean_alpha_s,mean_alpha_t\n");
    for (level, block, g) in gates {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", level, block, g.mean_spatial(), g.mean_temporal());
    }
    s
}

pub fn write_gate_telemetry<T: Real>(path: impl AsRef<Path>, gates: &[(usize, usize, GateState<T>)]) -> Result<()> {
    std::fs::write(path, gate_telemetry_csv(gates))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check_subset;
    use crate::seed::rng_from_seed;

    fn block_params(c_in: usize, c_out: usize, seed: u64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        init_most(&mut p, "blk", c_in, c_out, &mut rng_from_seed(seed));
        p
    }

    fn run_block(p: &ParamSet<f64>, x: &Tensor<f64>, mode: Mode, seed: u64) -> (Tensor<f64>, GateState<f64>) {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let v = MoSTVars::bind(&bound, "blk").unwrap();
        let xv = tape.constant(x.clone());
        let (o, s, t) = most_block(&mut tape, xv, &v, mode, &mut rng_from_seed(seed)).unwrap();
        (tape.value(o).clone(), GateState { alpha_s: tape.value(s).clone(), alpha_t: tape.value(t).clone() })
    }

    #[test]
    fn zero_gate_weights_split_evenly() {
        let mut p = block_params(3, 3, 1);
        for k in ["wg", "wz"] {
            *p.get_mut(&format!("blk.{k}")).unwrap() = Tensor::zeros(&[3, 2]);
        }
        let x = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng_from_seed(2));
        let (_, g) = run_block(&p, &x, Mode::Eval, 0);
        assert!(g.alpha_s.data().iter().chain(g.alpha_t.data()).all(|a| *a == 0.5));
    }

    #[test]
    fn saturated_gate_selects_spatial_branch() {
        let mut p = block_params(2, 2, 3);
        *p.get_mut("blk.bg").unwrap() = Tensor::new(&[2], vec![80.0, -80.0]).unwrap();
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng_from_seed(4));
        let (out, g) = run_block(&p, &x, Mode::Eval, 0);
        assert!(g.alpha_t.data().iter().all(|a| *a < 1e-30));
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let a = tape.silu(xv);
        let fs = tape.conv_spatial(a, bound.var("blk.ws").unwrap(), bound.var("blk.bs").unwrap(), 1).unwrap();
        let expect = tape.add(fs, xv).unwrap();
        assert!(out.max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn single_frame_and_channel_change() {
        let p = block_params(3, 5, 5);
        let x = Tensor::randn(&[3, 1, 4, 8], 1.0, &mut rng_from_seed(6));
        let (out, g) = run_block(&p, &x, Mode::Train, 7);
        assert_eq!(out.shape(), &[5, 1, 4, 8]);
        assert!(out.all_finite());
        for (s, t) in g.alpha_s.data().iter().zip(g.alpha_t.data()) {
            assert!((s + t - 1.0).abs() < 1e-15);
        }
        let bad = Tensor::zeros(&[4, 1, 4, 8]);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let v = MoSTVars::bind(&bound, "blk").unwrap();
        let xv = tape.constant(bad);
        assert!(most_block(&mut tape, xv, &v, Mode::Eval, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn train_mode_is_seeded_and_eval_is_deterministic() {
        let p = block_params(2, 2, 8);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng_from_seed(9));
        assert_eq!(run_block(&p, &x, Mode::Train, 11), run_block(&p, &x, Mode::Train, 11));
        assert_ne!(run_block(&p, &x, Mode::Train, 11).1, run_block(&p, &x, Mode::Train, 12).1);
        assert_eq!(run_block(&p, &x, Mode::Eval, 1), run_block(&p, &x, Mode::Eval, 2));
    }

    #[test]
    fn regularization_values() {
        let gate = |s: Vec<f64>| {
            let t: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
            let n = s.len();
            GateState { alpha_s: Tensor::new(&[1, 1, 1, n], s).unwrap(), alpha_t: Tensor::new(&[1, 1, 1, n], t).unwrap() }
        };
        assert_eq!(gate_regularization(&[gate(vec![0.5; 6])]), 0.0);
        assert!((gate_regularization(&[gate(vec![0.2, 0.8])]) - 0.72).abs() < 1e-12);
        let a = gate_regularization(&[gate(vec![0.1, 0.4, 0.7])]);
        let b = gate_regularization(&[gate(vec![0.7, 0.1, 0.4])]);
        assert!((a - b).abs() < 1e-15 && a > 0.0);

        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::new(&[2], vec![0.2, 0.8]).unwrap());
        let t = tape.leaf(Tensor::new(&[2], vec![0.8, 0.2]).unwrap());
        let r = gate_regularization_on_tape(&mut tape, &[GateVars { alpha_s: s, alpha_t: t, level: 0, block: 0 }]).unwrap();
        assert!((tape.value(r).item() - 0.72).abs() < 1e-12);
        assert!(gate_regularization_on_tape(&mut tape, &[]).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let p = block_params(2, 2, 13);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng_from_seed(14));
        let mut tensors = vec![x];
        tensors.extend(p.tensors().iter().cloned());
        for (i, t) in tensors.iter_mut().enumerate().skip(1) {
            if t.data().iter().all(|v| *v == 0.0) {
                *t = Tensor::randn(t.shape(), 0.3, &mut rng_from_seed(100 + i as u64));
            }
        }
        let readout = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng_from_seed(15));
        let report = finite_diff_check_subset(&tensors, 1e-5, 40, |tape, v| {
            let vars = MoSTVars {
                ws: v[1], bs: v[2], wt: v[3], bt: v[4], m1w: v[5], m1b: v[6], m2w: v[7], m2b: v[8], wg: v[9], bg: v[10], wz: v[11],
            };
            let (o, s, t) = most_block(tape, v[0], &vars, Mode::Train, &mut rng_from_seed(16))?;
            let r = tape.constant(readout.clone());
            let m = tape.mul(o, r)?;
            let a = tape.sum(m);
            let g = gate_regularization_on_tape(tape, &[GateVars { alpha_s: s, alpha_t: t, level: 0, block: 0 }])?;
            tape.add(a, g)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn toy_denoiser_shapes_and_gates() {
        let cfg = DenoiserConfig::toy(3);
        let p: ParamSet<f64> = build_denoiser(&cfg, &mut rng_from_seed(20)).unwrap();
        assert_eq!(p.scalar_count(), cfg.parameter_count());
        let x = Tensor::randn(&[2, 2, 8, 16], 1.0, &mut rng_from_seed(21));
        let out = predict(&p, &cfg, &x, 0.3, None, Mode::Train, &mut rng_from_seed(22)).unwrap();
        assert_eq!(out.eps.shape(), &[2, 2, 8, 16]);
        assert_eq!(out.mask_logits.shape(), &[1, 2, 8, 16]);
        assert_eq!(out.gates.len(), 3);
        for (_, _, g) in &out.gates {
            for (s, t) in g.alpha_s.data().iter().zip(g.alpha_t.data()) {
                assert!((s + t - 1.0).abs() < 1e-12 && *s >= 0.0 && *t >= 0.0);
            }
        }
        let zero = Tensor::zeros(&[3, 2, 8, 16]);
        let a = predict(&p, &cfg, &x, 0.3, None, Mode::Eval, &mut rng_from_seed(0)).unwrap();
        let b = predict(&p, &cfg, &x, 0.3, Some(&zero), Mode::Eval, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a.eps, b.eps);
        let csv = gate_telemetry_csv(&a.gates);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("level,block,mean_alpha_s,mean_alpha_t\n0,0,"));
    }

    #[test]
    fn denoiser_input_errors() {
        let cfg = DenoiserConfig::toy(0);
        let p: ParamSet<f64> = build_denoiser(&cfg, &mut rng_from_seed(23)).unwrap();
        let odd = Tensor::zeros(&[2, 1, 7, 16]);
        assert!(matches!(predict(&p, &cfg, &odd, 0.5, None, Mode::Eval, &mut rng_from_seed(0)), Err(crate::U4dError::Config(_))));
        let x = Tensor::zeros(&[2, 1, 8, 16]);
        assert!(matches!(predict(&p, &cfg, &x, 1.5, None, Mode::Eval, &mut rng_from_seed(0)), Err(crate::U4dError::Domain(_))));
        assert!(predict(&p, &cfg, &x, 0.5, Some(&x), Mode::Eval, &mut rng_from_seed(0)).is_err());
        let mut bad = cfg.clone();
        bad.dims = vec![];
        assert!(build_denoiser::<f64, _>(&bad, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn paper_profile_builds_reproducibly() {
        let cfg = DenoiserConfig::paper(3);
        let a: ParamSet<f32> = build_denoiser(&cfg, &mut rng_from_seed(7)).unwrap();
        let b: ParamSet<f32> = build_denoiser(&cfg, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a.scalar_count(), cfg.parameter_count());
        assert_eq!(a.scalar_count(), b.scalar_count());
        assert!(a == b);
        assert_eq!(cfg.dims, vec![64, 128, 256, 512]);
    }

    #[test]
    fn time_embedding_endpoints() {
        let e = time_embedding(0.0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }
}
