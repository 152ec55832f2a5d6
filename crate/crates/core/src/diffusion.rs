//! Cosine noise schedule, forward process, the two training objectives,
//! the ancestral sampler and two-stage generation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::backbone::{denoiser_forward, gate_regularization_on_tape, predict, DenoiserConfig, DenoiserOutput, Mode};
use crate::cloud::PointCloud;
use crate::error::{bail, Result, U4dError};
use crate::geometry::{decode_model_output, encode_model_input, infer_mask, unproject, RangeImage, SensorConfig};
use crate::scalar::Real;
use crate::seed::{derive_rng, rng_from_seed, SeededRng};

/// `ᾱ(t) = cos²(π/2·(t+s)/(1+s)) / cos²(π/2·s/(1+s))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub offset: f64,
}

/// Largest per-step β the sampler will use.
pub const MAX_BETA: f64 = 0.999;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { offset: 0.008 }
    }
}

impl NoiseSchedule {
    pub fn cosine(offset: f64) -> Result<Self> {
        if !(offset > 0.0 && offset < 1.0) {
            bail!(Config, "cosine offset must lie in (0, 1), got {}", offset);
        }
        Ok(Self { offset })
    }

    fn f(&self, t: f64) -> f64 {
        let a = (t + self.offset) / (1.0 + self.offset) * std::f64::consts::FRAC_PI_2;
        a.cos().powi(2)
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            bail!(Domain, "diffusion time {} outside [0, 1]", t);
        }
        Ok((self.f(t) / self.f(0.0)).clamp(0.0, 1.0))
    }

    /// `(β, β̃)` for the step from `t` down to `s < t`.
    pub fn step_betas(&self, t: f64, s: f64) -> Result<(f64, f64)> {
        let (at, as_) = (self.alpha_bar(t)?, self.alpha_bar(s)?);
        let beta = (1.0 - at / as_).min(MAX_BETA);
        let tilde = if 1.0 - at > 0.0 { (1.0 - as_) / (1.0 - at) * beta } else { 0.0 };
        Ok((beta, tilde))
    }
}

/// `x_t = √ᾱ·x₀ + √(1−ᾱ)·ε`.
pub fn q_sample<T: Real>(x0: &Tensor<T>, t: f64, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        bail!(Shape, "q_sample: x0 {:?} vs eps {:?}", x0.shape(), eps.shape());
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * *x + b * *e).collect();
    Tensor::new(x0.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Uncertainty,
    Completion,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::Uncertainty => 1,
            Stage::Completion => 2,
        }
    }
}

/// One training example in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    /// `2×L×H×W` clean target.
    pub x0: Tensor<T>,
    /// `1×L×H×W` occupancy in {0,1}; stage 1 only.
    pub mask: Option<Tensor<T>>,
    /// `3×L×H×W` conditioning; stage 2 only.
    pub cond: Option<Tensor<T>>,
}

/// Random draws for one example: diffusion time, noise and a gate seed.
#[derive(Debug, Clone)]
pub struct SampleNoise<T> {
    pub t: f64,
    pub eps: Tensor<T>,
    pub gate_seed: u64,
}

pub fn draw_sample_noise<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> SampleNoise<T> {
    let t: f64 = rng.random();
    let eps = Tensor::randn(shape, 1.0, rng);
    let gate_seed: u64 = rng.random();
    SampleNoise { t, eps, gate_seed }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub gamma_reg: f64,
}

/// Scalar loss terms (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub noise: f64,
    pub mask: f64,
    pub reg: f64,
}

/// Tape nodes of one example's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub noise: Var,
    pub mask: Option<Var>,
    pub reg: Var,
}

/// `MSE(ε, ε̂) + λ·BCE(mask) + γ·ΣL_reg` from denoiser outputs.
pub fn assemble_loss<T: Real>(
    tape: &mut Tape<T>,
    eps: Var,
    out: &DenoiserOutput,
    target_mask: Option<Var>,
    w: LossWeights,
) -> Result<LossVars> {
    let noise = tape.mse(out.eps, eps)?;
    let reg = gate_regularization_on_tape(tape, &out.gates)?;
    let mut total = noise;
    let mask = match target_mask {
        Some(m) => {
            let bce = tape.bce_with_logits(out.mask_logits, m)?;
            let scaled = tape.scale(bce, w.lambda_mask);
            total = tape.add(total, scaled)?;
            Some(bce)
        }
        None => None,
    };
    let r = tape.scale(reg, w.gamma_reg);
    let total = tape.add(total, r)?;
    Ok(LossVars { total, noise, mask, reg })
}

fn example_loss<T: Real>(
    params: &ParamSet<T>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    stage: Stage,
    sample: &TrainSample<T>,
    noise: &SampleNoise<T>,
    w: LossWeights,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x_t = tape.constant(q_sample(&sample.x0, noise.t, &noise.eps, sched)?);
    let eps = tape.constant(noise.eps.clone());
    let (cond, mask) = match stage {
        Stage::Uncertainty => {
            let m = match &sample.mask {
                Some(m) => tape.constant(m.clone()),
                None => bail!(Usage, "stage-1 example without an occupancy mask"),
            };
            (None, Some(m))
        }
        Stage::Completion => match &sample.cond {
            Some(c) => (Some(tape.constant(c.clone())), None),
            None => bail!(Usage, "stage-2 example without conditioning"),
        },
    };
    let mut rng = rng_from_seed(noise.gate_seed);
    let out = denoiser_forward(&mut tape, &bound, cfg, x_t, noise.t, cond, Mode::Train, &mut rng)?;
    let lv = assemble_loss(&mut tape, eps, &out, mask, w)?;
    let grads = tape.backward(lv.total)?;
    let report = LossReport {
        total: tape.value(lv.total).item().f64(),
        noise: tape.value(lv.noise).item().f64(),
        mask: lv.mask.map(|m| tape.value(m).item().f64()).unwrap_or(0.0),
        reg: tape.value(lv.reg).item().f64(),
    };
    Ok((report, bound.gradients(&grads)))
}

/// Batch-mean loss and parameter gradients for either stage.
pub fn stage_loss<T: Real, R: Rng>(
    params: &ParamSet<T>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    stage: Stage,
    batch: &[TrainSample<T>],
    w: LossWeights,
    rng: &mut R,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        bail!(Usage, "empty training batch");
    }
    let noises: Vec<SampleNoise<T>> = batch.iter().map(|s| draw_sample_noise(s.x0.shape(), rng)).collect();
    let per: Vec<Result<(LossReport, Vec<Tensor<T>>)>> = batch
        .par_iter()
        .zip(noises.par_iter())
        .map(|(s, n)| example_loss(params, cfg, sched, stage, s, n, w))
        .collect();
    let k = T::c(1.0 / batch.len() as f64);
    let mut report = LossReport::default();
    let mut grads: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in per {
        let (rep, g) = r?;
        report.total += rep.total;
        report.noise += rep.noise;
        report.mask += rep.mask;
        report.reg += rep.reg;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += *v * k;
            }
        }
    }
    let n = batch.len() as f64;
    report.total /= n;
    report.noise /= n;
    report.mask /= n;
    report.reg /= n;
    Ok((report, grads))
}

/// Stage-1 objective on `(x₀ᵘ, mᵘ)` examples.
pub fn stage1_loss<T: Real, R: Rng>(
    params: &ParamSet<T>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    batch: &[TrainSample<T>],
    w: LossWeights,
    rng: &mut R,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    stage_loss(params, cfg, sched, Stage::Uncertainty, batch, w, rng)
}

/// Stage-2 objective on `(x₀, cond)` examples; the mask weight is ignored.
pub fn stage2_loss<T: Real, R: Rng>(
    params: &ParamSet<T>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    batch: &[TrainSample<T>],
    gamma_reg: f64,
    rng: &mut R,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    stage_loss(params, cfg, sched, Stage::Completion, batch, LossWeights { lambda_mask: 0.0, gamma_reg }, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_every: usize,
    pub lambda_mask: f64,
    pub gamma_reg: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch: 4,
            lr: 1e-4,
            warmup: 10_000,
            weight_decay: 0.01,
            ema_decay: 0.995,
            ema_every: 10,
            lambda_mask: 1.0,
            gamma_reg: 0.01,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.ema_every == 0 {
            bail!(Config, "steps, batch and ema interval must be positive");
        }
        if !(self.lr > 0.0) || self.warmup == 0 || self.warmup >= self.steps {
            bail!(Config, "need lr > 0 and 0 < warmup < steps (lr {}, warmup {}, steps {})", self.lr, self.warmup, self.steps);
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            bail!(Config, "ema decay must lie in (0, 1), got {}", self.ema_decay);
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_mask >= 0.0) || !(self.gamma_reg >= 0.0) {
            bail!(Config, "weight decay and loss weights must be nonnegative");
        }
        Ok(())
    }

    /// Linear warmup from 0 to the peak, then cosine decay to 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let p = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_mask: self.lambda_mask, gamma_reg: self.gamma_reg }
    }
}

/// AdamW with `β₁ = 0.9`, `β₂ = 0.99`, decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gf = gi.f64();
                let mf = b1 * mi.f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.f64() + (1.0 - b2) * gf * gf;
                *mi = T::c(mf);
                *vi = T::c(vf);
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps) + self.weight_decay * pi.f64();
                *pi = T::c(pi.f64() - lr * update);
            }
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<T> {
    pub decay: f64,
    pub params: ParamSet<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(params: &ParamSet<T>, decay: f64) -> Self {
        Self { decay, params: params.clone() }
    }

    pub fn update(&mut self, current: &ParamSet<T>) {
        let (d, e) = (T::c(self.decay), T::c(1.0 - self.decay));
        for (a, p) in self.params.tensors_mut().iter_mut().zip(current.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(p.data()) {
                *x = d * *x + e * *y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,noise,mask,reg,lr\n");
    for r in rows {
        s.push_str(&format!("{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n", r.step, r.loss.total, r.loss.noise, r.loss.mask, r.loss.reg, r.lr));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    pub ema: ParamSet<T>,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Optimize `params` on batches from `data` for `cfg.steps` steps, or until
/// the stream ends. Checkpoints of the EMA weights go to `checkpoint_dir`
/// every `cfg.checkpoint_every` steps when both are set.
pub fn train_stage<T: Real, I>(
    stage: Stage,
    mut params: ParamSet<T>,
    dcfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    data: I,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>>
where
    I: IntoIterator<Item = Vec<TrainSample<T>>>,
{
    cfg.validate()?;
    check_compatible(&params, dcfg)?;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut ema = Ema::new(&params, cfg.ema_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let w = cfg.weights();
    for (step, batch) in data.into_iter().take(cfg.steps).enumerate() {
        let mut rng = derive_rng(cfg.seed, "train-step", step as u64);
        let (report, grads) = stage_loss(&params, dcfg, sched, stage, &batch, w, &mut rng)?;
        let finite_grads = grads.iter().all(|g| g.all_finite());
        if !report.total.is_finite() || !finite_grads {
            return Err(U4dError::NonFiniteLoss {
                step,
                batch_id: step,
                detail: format!(
                    "stage {} loss {} (noise {}, mask {}, reg {}), finite gradients: {}",
                    stage.index(),
                    report.total,
                    report.noise,
                    report.mask,
                    report.reg,
                    finite_grads
                ),
            });
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut params, &grads, lr);
        if (step + 1) % cfg.ema_every == 0 {
            ema.update(&params);
        }
        log.push(LogRow { step, lr, loss: report });
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("stage{}_step{:06}.u4dp", stage.index(), step + 1));
                ema.params.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { params, ema: ema.params, log, checkpoints })
}

/// Parameter set matches the layout implied by `cfg`.
pub fn check_compatible<T: Real>(params: &ParamSet<T>, cfg: &DenoiserConfig) -> Result<()> {
    let layout = cfg.layout();
    let ok = layout.len() == params.len()
        && layout.iter().zip(params.iter()).all(|((n, s), (pn, pt))| n == pn && s.as_slice() == pt.shape());
    if !ok {
        bail!(Config, "checkpoint does not match the denoiser configuration (dims {:?})", cfg.dims);
    }
    Ok(())
}

/// Noise prediction interface used by the sampler.
pub trait NoisePredictor<T: Real> {
    /// Returns `(ε̂, mask logits)` at time `t`.
    fn predict(&self, x_t: &Tensor<T>, t: f64, cond: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Trained denoiser in eval mode.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a, T> {
    pub params: &'a ParamSet<T>,
    pub cfg: &'a DenoiserConfig,
}

impl<T: Real> NoisePredictor<T> for Denoiser<'_, T> {
    fn predict(&self, x_t: &Tensor<T>, t: f64, cond: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut unused = rng_from_seed(0);
        let p = predict(self.params, self.cfg, x_t, t, cond, Mode::Eval, &mut unused)?;
        Ok((p.eps, p.mask_logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    /// No noise after the initial draw.
    DeterministicZeroNoise,
}

/// Reverse-process settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SampleMode,
    /// Clamp the implied `x̂₀` to `[−1, 1]` and re-derive `ε̂` from it.
    pub clip_denoised: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, mode: SampleMode) -> Self {
        Self { steps, mode, clip_denoised: false }
    }

    pub fn clipped(self) -> Self {
        Self { clip_denoised: true, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<T> {
    pub x0: Tensor<T>,
    /// Binary `1×L×H×W` occupancy when `with_mask` was requested.
    pub mask: Option<Tensor<T>>,
}

/// Ancestral sampling on `t_k = k/steps`, `k = steps … 1`. With `with_mask`
/// the final mask logits are thresholded at probability 0.5 and pixels
/// outside the mask are set to −1.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<T: Real, P: NoisePredictor<T>, R: Rng>(
    model: &P,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    shape: &[usize],
    cond: Option<&Tensor<T>>,
    with_mask: bool,
    rng: &mut R,
) -> Result<SampleOutput<T>> {
    let SamplerConfig { steps, mode, clip_denoised } = *sampler;
    if steps == 0 {
        bail!(Config, "sampler needs at least one step");
    }
    let mut x: Tensor<T> = Tensor::randn(shape, 1.0, rng);
    let mut last_logits = None;
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let s = (k - 1) as f64 / steps as f64;
        let (eps, logits) = model.predict(&x, t, cond)?;
        if eps.shape() != shape {
            bail!(Shape, "predictor returned {:?} for {:?}", eps.shape(), shape);
        }
        let (beta, tilde) = sched.step_betas(t, s)?;
        let ab_t = sched.alpha_bar(t)?;
        let coef = beta / (1.0 - ab_t).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let sigma = tilde.sqrt();
        let noisy = mode == SampleMode::Stochastic && k > 1;
        let z: Option<Tensor<T>> = noisy.then(|| Tensor::randn(shape, 1.0, rng));
        let mut next = Vec::with_capacity(x.numel());
        let (ra, rb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        for i in 0..x.numel() {
            let xi = x.data()[i].f64();
            let mut e = eps.data()[i].f64();
            if clip_denoised {
                let x0 = ((xi - rb * e) / ra).clamp(-1.0, 1.0);
                e = (xi - ra * x0) / rb;
            }
            let mut v = inv * (xi - coef * e);
            if let Some(z) = &z {
                v += sigma * z.data()[i].f64();
            }
            next.push(T::c(v));
        }
        x = Tensor::new(shape, next)?;
        last_logits = Some(logits);
    }
    let mask = if with_mask {
        let logits = last_logits.expect("at least one step");
        let plane: usize = shape[1..].iter().product();
        if logits.numel() != plane {
            bail!(Shape, "mask logits {:?} for sample {:?}", logits.shape(), shape);
        }
        let m: Vec<T> = logits.data().iter().map(|l| if *l > T::zero() { T::one() } else { T::zero() }).collect();
        for c in 0..shape[0] {
            for (p, keep) in m.iter().enumerate() {
                if *keep == T::zero() {
                    x.data_mut()[c * plane + p] = -T::one();
                }
            }
        }
        let mut ms = shape.to_vec();
        ms[0] = 1;
        Some(Tensor::new(&ms, m)?)
    } else {
        None
    };
    Ok(SampleOutput { x0: x, mask })
}

/// Stack frames into `2×L×H×W` model space plus a `1×L×H×W` occupancy.
pub fn encode_sequence<T: Real>(frames: &[RangeImage<T>], sensor: &SensorConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    if frames.is_empty() {
        bail!(InsufficientFrames, "cannot encode an empty sequence");
    }
    let (l, n) = (frames.len(), sensor.pixels());
    let mut x = vec![T::zero(); 2 * l * n];
    let mut m = vec![T::zero(); l * n];
    for (f, img) in frames.iter().enumerate() {
        let enc = encode_model_input(img, sensor)?;
        for c in 0..2 {
            x[(c * l + f) * n..(c * l + f + 1) * n].copy_from_slice(&enc[c * n..(c + 1) * n]);
        }
        for (i, valid) in img.mask.iter().enumerate() {
            if *valid {
                m[f * n + i] = T::one();
            }
        }
    }
    let (h, w) = (sensor.height, sensor.width);
    Ok((Tensor::new(&[2, l, h, w], x)?, Tensor::new(&[1, l, h, w], m)?))
}

/// Channels `(depth, intensity, occupancy)` of the uncertainty view.
pub fn conditioning_tensor<T: Real>(x0u: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ms) = (x0u.shape(), mask.shape());
    if xs.len() != 4 || xs[0] != 2 || ms.len() != 4 || ms[0] != 1 || xs[1..] != ms[1..] {
        bail!(Shape, "conditioning from {:?} and {:?}", xs, ms);
    }
    let mut data = x0u.data().to_vec();
    data.extend_from_slice(mask.data());
    Tensor::new(&[3, xs[1], xs[2], xs[3]], data)
}

/// Split model space back into frames. Pixels are valid where `mask` is set,
/// or, without a mask, where the decoded depth reaches `min_depth`.
pub fn decode_sequence<T: Real>(x: &Tensor<T>, mask: Option<&Tensor<T>>, sensor: &SensorConfig, min_depth: f64) -> Result<Vec<RangeImage<T>>> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 2 || s[2] != sensor.height || s[3] != sensor.width {
        bail!(Shape, "cannot decode {:?} for a {}x{} sensor", s, sensor.height, sensor.width);
    }
    let (l, n) = (s[1], sensor.pixels());
    let mut frames = Vec::with_capacity(l);
    for f in 0..l {
        let mut plane = Vec::with_capacity(2 * n);
        for c in 0..2 {
            plane.extend_from_slice(&x.data()[(c * l + f) * n..(c * l + f + 1) * n]);
        }
        let valid: Vec<bool> = match mask {
            Some(m) => m.data()[f * n..(f + 1) * n].iter().map(|v| *v > T::c(0.5)).collect(),
            None => infer_mask(&plane, sensor, min_depth),
        };
        frames.push(decode_model_output(&plane, &valid, sensor)?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub sensor: SensorConfig,
    pub frames: usize,
    pub sampler: SamplerConfig,
    pub min_depth: f64,
    /// Replace the stage-1 conditioning with zeros.
    pub zero_condition: bool,
}

#[derive(Debug, Clone)]
pub struct Generated<T> {
    pub uncertainty_view: Vec<RangeImage<T>>,
    pub frames: Vec<RangeImage<T>>,
    pub clouds: Vec<PointCloud<T>>,
}

/// Stage 1 samples an uncertainty view, stage 2 completes the scene
/// conditioned on it; both decoded and unprojected.
pub fn generate_4d<T: Real>(
    stage1: (&ParamSet<T>, &DenoiserConfig),
    stage2: (&ParamSet<T>, &DenoiserConfig),
    sched: &NoiseSchedule,
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<Generated<T>> {
    let (p1, c1) = stage1;
    let (p2, c2) = stage2;
    check_compatible(p1, c1)?;
    check_compatible(p2, c2)?;
    if c1.cond_channels != 0 || c2.cond_channels != 3 || c1.in_channels != 2 || c2.in_channels != 2 {
        bail!(Config, "stage 1 must be unconditional and stage 2 take 3 conditioning channels");
    }
    c1.check_dims(cfg.sensor.height, cfg.sensor.width)?;
    c2.check_dims(cfg.sensor.height, cfg.sensor.width)?;
    if cfg.frames == 0 {
        bail!(Config, "need at least one frame");
    }
    let shape = [2, cfg.frames, cfg.sensor.height, cfg.sensor.width];
    let mut rng1: SeededRng = derive_rng(seed, "generate-stage1", 0);
    let s1 = ddpm_sample(&Denoiser { params: p1, cfg: c1 }, sched, &cfg.sampler, &shape, None, true, &mut rng1)?;
    let m1 = s1.mask.clone().expect("stage 1 returns a mask");
    let cond = if cfg.zero_condition {
        Tensor::zeros(&[3, cfg.frames, cfg.sensor.height, cfg.sensor.width])
    } else {
        conditioning_tensor(&s1.x0, &m1)?
    };
    let mut rng2: SeededRng = derive_rng(seed, "generate-stage2", 0);
    let s2 = ddpm_sample(&Denoiser { params: p2, cfg: c2 }, sched, &cfg.sampler, &shape, Some(&cond), false, &mut rng2)?;
    let uncertainty_view = decode_sequence(&s1.x0, Some(&m1), &cfg.sensor, cfg.min_depth)?;
    let frames = decode_sequence(&s2.x0, None, &cfg.sensor, cfg.min_depth)?;
    let clouds = frames.iter().map(|f| unproject(f, &cfg.sensor)).collect::<Result<Vec<_>>>()?;
    Ok(Generated { uncertainty_view, frames, clouds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_denoiser, gate_regularization};
    use crate::seed::rng_from_seed;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        assert!(s.alpha_bar(1.0).unwrap() <= 1e-4);
        let mut prev = 1.0;
        for k in 1..=256 {
            let a = s.alpha_bar(k as f64 / 256.0).unwrap();
            assert!(a < prev);
            prev = a;
        }
        assert!(matches!(s.alpha_bar(1.01), Err(U4dError::Domain(_))));
        assert!(s.alpha_bar(-0.01).is_err());
        assert!(NoiseSchedule::cosine(0.0).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = NoiseSchedule::default();
        let x0: Tensor<f64> = Tensor::randn(&[2, 1, 2, 4], 1.0, &mut rng_from_seed(1));
        let eps = Tensor::randn(&[2, 1, 2, 4], 1.0, &mut rng_from_seed(2));
        assert_eq!(q_sample(&x0, 0.0, &eps, &s).unwrap(), x0);
        let norm: f64 = x0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let x1 = q_sample(&x0, 1.0, &eps, &s).unwrap();
        let diff: f64 = x1.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(diff <= 1e-2 * norm);
        assert!(q_sample(&x0, 0.5, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(cfg.warmup) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(cfg.warmup / 2) - 0.5e-4).abs() < 1e-18);
        assert!(cfg.lr_at(cfg.steps) < 1e-18);
        assert!(TrainConfig { warmup: 100_000, ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn ema_single_update() {
        let mut p0 = ParamSet::<f64>::new();
        p0.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut p1 = ParamSet::<f64>::new();
        p1.insert("w", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let mut ema = Ema::new(&p0, 0.995);
        ema.update(&p1);
        let got = ema.params.get("w").unwrap().data();
        assert!((got[0] - (0.995 * 1.0 + 0.005 * 3.0)).abs() < 1e-15);
        assert!((got[1] - (0.995 * -2.0 + 0.005 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[Tensor::new(&[2], vec![0.5, -3.0]).unwrap()], 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    fn toy_out(tape: &mut Tape<f64>, eps: &Tensor<f64>, logits: &Tensor<f64>, gate: f64) -> DenoiserOutput {
        let e = tape.leaf(eps.clone());
        let m = tape.leaf(logits.clone());
        let s = tape.leaf(Tensor::full(&[1, 1, 2, 2], gate));
        let t = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0 - gate));
        DenoiserOutput { eps: e, mask_logits: m, gates: vec![crate::backbone::GateVars { alpha_s: s, alpha_t: t, level: 0, block: 0 }] }
    }

    #[test]
    fn loss_vanishes_on_perfect_outputs() {
        let eps = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng_from_seed(3));
        let target = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let logits = target.map(|m| if m > 0.5 { 20.0 } else { -20.0 });
        let mut tape = Tape::new();
        let out = toy_out(&mut tape, &eps, &logits, 0.5);
        let e = tape.constant(eps.clone());
        let m = tape.constant(target);
        let w = LossWeights { lambda_mask: 1.0, gamma_reg: 0.01 };
        let lv = assemble_loss(&mut tape, e, &out, Some(m), w).unwrap();
        assert!(tape.value(lv.total).item() < 1e-6);
        let lv2 = assemble_loss(&mut tape, e, &out, None, w).unwrap();
        assert_eq!(tape.value(lv2.total).item(), 0.0);
    }

    fn toy_setup(cond: usize) -> (DenoiserConfig, ParamSet<f64>, Vec<TrainSample<f64>>) {
        let cfg = DenoiserConfig::toy(cond);
        let params = build_denoiser(&cfg, &mut rng_from_seed(40)).unwrap();
        let mut r = rng_from_seed(41);
        let batch = (0..2)
            .map(|_| {
                let x0 = Tensor::randn(&[2, 2, 8, 16], 0.5, &mut r);
                let mask = Tensor::new(&[1, 2, 8, 16], (0..256).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
                let c = (cond > 0).then(|| conditioning_tensor(&x0, &mask).unwrap());
                TrainSample { x0, mask: Some(mask), cond: c }
            })
            .collect();
        (cfg, params, batch)
    }

    #[test]
    fn stage1_loss_is_linear_in_weights() {
        let (cfg, params, batch) = toy_setup(0);
        let s = NoiseSchedule::default();
        let run = |l: f64, g: f64| stage1_loss(&params, &cfg, &s, &batch, LossWeights { lambda_mask: l, gamma_reg: g }, &mut rng_from_seed(5)).unwrap().0;
        let base = run(0.0, 0.0);
        assert_eq!(base.total, base.noise);
        let full = run(0.7, 0.3);
        assert!((full.total - (base.total + 0.7 * full.mask + 0.3 * full.reg)).abs() < 1e-12);
        assert_eq!(full.mask, base.mask);
    }

    #[test]
    fn stage1_loss_matches_term_by_term_oracle() {
        let (cfg, params, batch) = toy_setup(0);
        let s = NoiseSchedule::default();
        let w = LossWeights { lambda_mask: 0.8, gamma_reg: 0.05 };
        let (got, _) = stage1_loss(&params, &cfg, &s, &batch, w, &mut rng_from_seed(6)).unwrap();
        let mut r = rng_from_seed(6);
        let mut total = 0.0;
        for ex in &batch {
            let n = draw_sample_noise::<f64, _>(ex.x0.shape(), &mut r);
            let ab = s.alpha_bar(n.t).unwrap();
            let x_t: Vec<f64> = ex.x0.data().iter().zip(n.eps.data()).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
            let x_t = Tensor::new(ex.x0.shape(), x_t).unwrap();
            let p = predict(&params, &cfg, &x_t, n.t, None, Mode::Train, &mut rng_from_seed(n.gate_seed)).unwrap();
            let mse = p.eps.data().iter().zip(n.eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n.eps.numel() as f64;
            let m = ex.mask.as_ref().unwrap();
            let bce = p
                .mask_logits
                .data()
                .iter()
                .zip(m.data())
                .map(|(z, y)| {
                    let p1 = 1.0 / (1.0 + (-z).exp());
                    -(y * p1.ln() + (1.0 - y) * (1.0 - p1).ln())
                })
                .sum::<f64>()
                / m.numel() as f64;
            let states: Vec<_> = p.gates.into_iter().map(|g| g.2).collect();
            total += mse + 0.8 * bce + 0.05 * gate_regularization(&states);
        }
        total /= batch.len() as f64;
        assert!((got.total - total).abs() < 1e-10, "{} vs {}", got.total, total);
    }

    #[test]
    fn stage2_null_condition_and_errors() {
        let (cfg, params, mut batch) = toy_setup(3);
        let s = NoiseSchedule::default();
        for ex in &mut batch {
            ex.cond = Some(Tensor::zeros(&[3, 2, 8, 16]));
        }
        let a = stage2_loss(&params, &cfg, &s, &batch, 0.01, &mut rng_from_seed(7)).unwrap().0;
        assert_eq!(a.mask, 0.0);
        // zeros passed explicitly equal the implicit null conditioning
        let ex = &batch[0];
        let p0 = predict(&params, &cfg, &ex.x0, 0.4, None, Mode::Eval, &mut rng_from_seed(0)).unwrap();
        let p1 = predict(&params, &cfg, &ex.x0, 0.4, ex.cond.as_ref(), Mode::Eval, &mut rng_from_seed(0)).unwrap();
        assert_eq!(p0.eps, p1.eps);
        for ex in &mut batch {
            ex.cond = None;
        }
        assert!(matches!(stage2_loss(&params, &cfg, &s, &batch, 0.01, &mut rng_from_seed(7)), Err(U4dError::Usage(_))));
    }

    struct ZeroNoise;

    impl NoisePredictor<f64> for ZeroNoise {
        fn predict(&self, x_t: &Tensor<f64>, _t: f64, _c: Option<&Tensor<f64>>) -> Result<(Tensor<f64>, Tensor<f64>)> {
            let s = x_t.shape();
            let mut ms = s.to_vec();
            ms[0] = 1;
            let logits = Tensor::new(&ms, (0..ms.iter().product::<usize>()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect())?;
            Ok((Tensor::zeros(s), logits))
        }
    }

    #[test]
    fn zero_noise_sampler_follows_scalar_recurrence() {
        let s = NoiseSchedule::default();
        let shape = [2, 1, 2, 2];
        for steps in [1usize, 4, 256] {
            let out = ddpm_sample(&ZeroNoise, &s, &SamplerConfig::new(steps, SampleMode::DeterministicZeroNoise), &shape, None, false, &mut rng_from_seed(9)).unwrap();
            let x_t: Tensor<f64> = Tensor::randn(&shape, 1.0, &mut rng_from_seed(9));
            let mut factor = 1.0;
            for k in 1..=steps {
                let at = s.alpha_bar(k as f64 / steps as f64).unwrap();
                let as_ = s.alpha_bar((k - 1) as f64 / steps as f64).unwrap();
                let beta = (1.0 - at / as_).min(0.999);
                factor /= (1.0 - beta).sqrt();
            }
            for (a, b) in out.x0.data().iter().zip(x_t.data()) {
                assert!((a - b * factor).abs() <= 1e-9 * (b * factor).abs().max(1.0));
            }
        }
        assert!(ddpm_sample(&ZeroNoise, &s, &SamplerConfig::new(0, SampleMode::Stochastic), &shape, None, false, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn clipped_sampler_stays_in_range() {
        let s = NoiseSchedule::default();
        let shape = [2, 1, 4, 4];
        let cfg = SamplerConfig::new(16, SampleMode::DeterministicZeroNoise).clipped();
        let out = ddpm_sample(&ZeroNoise, &s, &cfg, &shape, None, false, &mut rng_from_seed(5)).unwrap();
        assert!(out.x0.data().iter().all(|v: &f64| v.abs() <= 1.0 + 1e-9));
        let cfg = SamplerConfig::new(16, SampleMode::Stochastic).clipped();
        let out = ddpm_sample(&ZeroNoise, &s, &cfg, &shape, None, false, &mut rng_from_seed(5)).unwrap();
        assert!(out.x0.data().iter().all(|v: &f64| v.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn sampler_mask_and_reproducibility() {
        let s = NoiseSchedule::default();
        let shape = [2, 1, 2, 2];
        let a = ddpm_sample(&ZeroNoise, &s, &SamplerConfig::new(8, SampleMode::Stochastic), &shape, None, true, &mut rng_from_seed(3)).unwrap();
        let b = ddpm_sample(&ZeroNoise, &s, &SamplerConfig::new(8, SampleMode::Stochastic), &shape, None, true, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        let m = a.mask.unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(a.x0.shape(), &shape);
        for c in 0..2 {
            assert_eq!(a.x0.data()[c * 4 + 1], -1.0);
            assert_eq!(a.x0.data()[c * 4 + 3], -1.0);
        }
    }

    #[test]
    fn training_reduces_loss_and_detects_nan() {
        let (cfg, params, batch) = toy_setup(0);
        let s = NoiseSchedule::default();
        let tc = TrainConfig { steps: 60, batch: 2, lr: 3e-3, warmup: 5, ema_every: 10, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let tc_ck = TrainConfig { checkpoint_every: 20, ..tc.clone() };
        let out = train_stage(Stage::Uncertainty, params.clone(), &cfg, &s, &tc_ck, std::iter::repeat(batch.clone()), Some(dir.path())).unwrap();
        assert_eq!(out.log.len(), 60);
        assert_eq!(out.checkpoints.len(), 3);
        assert!(ParamSet::<f64>::load(&out.checkpoints[2]).unwrap() == out.ema);
        let first: f64 = out.log[..10].iter().map(|r| r.loss.total).sum();
        let last: f64 = out.log[50..].iter().map(|r| r.loss.total).sum();
        assert!(last < first, "{last} !< {first}");

        let mut bad = batch.clone();
        bad[1].x0.data_mut()[0] = f64::NAN;
        let err = train_stage(Stage::Uncertainty, params, &cfg, &s, &tc, std::iter::repeat(bad), None).unwrap_err();
        assert!(matches!(err, U4dError::NonFiniteLoss { step: 0, batch_id: 0, .. }));
    }

    #[test]
    fn sequence_codec_round_trip() {
        let sensor = SensorConfig::toy(8, 16);
        let mut frames = Vec::new();
        for f in 0..2 {
            let mut img = RangeImage::<f64>::for_sensor(&sensor);
            for i in (f..128).step_by(3) {
                img.depth[i] = 1.0 + i as f64 * 0.3;
                img.intensity[i] = 0.25;
                img.mask[i] = true;
            }
            frames.push(img);
        }
        let (x, m) = encode_sequence(&frames, &sensor).unwrap();
        assert_eq!(x.shape(), &[2, 2, 8, 16]);
        let back = decode_sequence(&x, Some(&m), &sensor, 0.5).unwrap();
        for (a, b) in back.iter().zip(&frames) {
            assert_eq!(a.mask, b.mask);
            for i in 0..128 {
                assert!((a.depth[i] - b.depth[i]).abs() < 1e-9);
            }
        }
        let inferred = decode_sequence(&x, None, &sensor, 0.5).unwrap();
        assert_eq!(inferred[0].mask, frames[0].mask);
        let c = conditioning_tensor(&x, &m).unwrap();
        assert_eq!(c.shape(), &[3, 2, 8, 16]);
    }

    #[test]
    fn generate_contract_and_determinism() {
        let c1 = DenoiserConfig::toy(0);
        let c2 = DenoiserConfig::toy(3);
        let p1: ParamSet<f32> = build_denoiser(&c1, &mut rng_from_seed(1)).unwrap();
        let p2: ParamSet<f32> = build_denoiser(&c2, &mut rng_from_seed(2)).unwrap();
        let g = GenerateConfig {
            sensor: SensorConfig::toy(8, 16),
            frames: 2,
            sampler: SamplerConfig::new(6, SampleMode::Stochastic).clipped(),
            min_depth: 0.5,
            zero_condition: false,
        };
        let s = NoiseSchedule::default();
        let a = generate_4d((&p1, &c1), (&p2, &c2), &s, &g, 77).unwrap();
        let b = generate_4d((&p1, &c1), (&p2, &c2), &s, &g, 77).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.clouds.len(), 2);
        for f in &a.frames {
            for (d, v) in f.depth.iter().zip(&f.mask) {
                if *v {
                    assert!(*d > 0.0 && *d as f64 <= 80.0);
                }
            }
        }
        assert!(matches!(generate_4d((&p2, &c2), (&p2, &c2), &s, &g, 1), Err(U4dError::Config(_))));
        assert!(matches!(generate_4d((&p1, &c2), (&p2, &c2), &s, &g, 1), Err(U4dError::Config(_))));
    }
}
