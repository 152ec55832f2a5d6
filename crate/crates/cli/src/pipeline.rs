//! Dataset windows, training samples and the toy two-stage experiment.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use u4d_core::autodiff::ParamSet;
use u4d_core::backbone::{build_denoiser, DenoiserConfig};
use u4d_core::diffusion::{
    conditioning_tensor, ddpm_sample, decode_sequence, encode_sequence, train_stage, Denoiser, LogRow, NoiseSchedule,
    SampleMode, SamplerConfig, Stage, TrainConfig, TrainOutcome, TrainSample,
};
use u4d_core::geometry::{project_points, unproject};
use u4d_core::metrics::chamfer;
use u4d_core::seed::derive_rng;
use u4d_core::synth::{synth_world, SequenceSample, SynthConfig};
use u4d_core::uncertainty::uncertainty_view_from_logits;
use u4d_core::seed::derive_seed;
use u4d_core::{RangeImage, Result, SensorConfig, Tensor32, U4dError};

/// Full and uncertainty-view range images of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneWindow {
    pub full: Vec<RangeImage<f32>>,
    pub sparse: Vec<RangeImage<f32>>,
}

pub fn synth_config(sensor: &SensorConfig, frames: usize) -> SynthConfig {
    SynthConfig { sensor: sensor.clone(), n_frames: frames, ..SynthConfig::default() }
}

/// Project every frame and build its top-K uncertainty view.
pub fn scene_window(sample: &SequenceSample, sensor: &SensorConfig, ratio: f64) -> Result<SceneWindow> {
    let Some(logits) = &sample.logits else {
        return Err(U4dError::Input("sequence carries no logits".into()));
    };
    if logits.len() != sample.frames.len() {
        return Err(U4dError::Alignment(format!("{} logit matrices for {} frames", logits.len(), sample.frames.len())));
    }
    let mut full = Vec::with_capacity(sample.frames.len());
    let mut sparse = Vec::with_capacity(sample.frames.len());
    for (cloud, m) in sample.frames.iter().zip(logits) {
        full.push(project_points(cloud, sensor).0);
        sparse.push(uncertainty_view_from_logits(cloud, &m.data, m.cols, ratio, sensor)?.0);
    }
    Ok(SceneWindow { full, sparse })
}

/// Windows `0..count` synthesized from seeds derived under `label`.
pub fn synth_windows(sensor: &SensorConfig, frames: usize, ratio: f64, count: usize, seed: u64, label: &str) -> Result<Vec<SceneWindow>> {
    let cfg = synth_config(sensor, frames);
    (0..count)
        .into_par_iter()
        .map(|k| {
            let s = derive_seed(seed, label, k as u64);
            scene_window(&synth_world(&cfg, s)?, sensor, ratio)
        })
        .collect()
}

pub fn stage1_sample(w: &SceneWindow, sensor: &SensorConfig) -> Result<TrainSample<f32>> {
    let (x0, mask) = encode_sequence(&w.sparse, sensor)?;
    Ok(TrainSample { x0, mask: Some(mask), cond: None })
}

pub fn stage2_sample(w: &SceneWindow, sensor: &SensorConfig) -> Result<TrainSample<f32>> {
    let (x0, _) = encode_sequence(&w.full, sensor)?;
    Ok(TrainSample { x0, mask: None, cond: Some(condition_of(w, sensor)?) })
}

/// Conditioning tensor built from the window's own uncertainty view.
pub fn condition_of(w: &SceneWindow, sensor: &SensorConfig) -> Result<Tensor32> {
    let (xu, mu) = encode_sequence(&w.sparse, sensor)?;
    conditioning_tensor(&xu, &mu)
}

/// Endless stream of batches drawn without replacement within a batch.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    samples: &'a [TrainSample<f32>],
    batch: usize,
    seed: u64,
    step: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(samples: &'a [TrainSample<f32>], batch: usize, seed: u64) -> Self {
        Self { samples, batch, seed, step: 0 }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Vec<TrainSample<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.samples.is_empty() || self.batch == 0 {
            return None;
        }
        let mut rng = derive_rng(self.seed, "batch", self.step);
        self.step += 1;
        let n = self.samples.len();
        let take = self.batch.min(n);
        let mut batch: Vec<_> = sample_indices(&mut rng, n, take).into_iter().map(|i| self.samples[i].clone()).collect();
        while batch.len() < self.batch {
            batch.push(self.samples[batch.len() % n].clone());
        }
        Some(batch)
    }
}

/// Chamfer between a generated frame and a reference cloud. An empty
/// generated frame counts as a single return at the sensor origin.
pub fn frame_chamfer(generated: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64> {
    if generated.is_empty() {
        return chamfer(&[[0.0; 3]], reference);
    }
    chamfer(generated, reference)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyExperiment {
    pub sensor: SensorConfig,
    pub frames: usize,
    pub topk_ratio: f64,
    pub train_windows: usize,
    pub eval_seeds: usize,
    pub train: TrainConfig,
    pub sample_steps: usize,
    pub min_depth: f64,
    pub seed: u64,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        let train = TrainConfig { steps: 2000, batch: 4, lr: 2e-3, warmup: 133, ..TrainConfig::default() };
        Self {
            sensor: SensorConfig::toy(16, 64),
            frames: 2,
            topk_ratio: 0.2,
            train_windows: 64,
            eval_seeds: 24,
            train,
            sample_steps: 256,
            min_depth: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyReport {
    pub stage1_log: Vec<LogRow>,
    pub stage2_log: Vec<LogRow>,
    /// Mean per-frame Chamfer to the held-out scene, one per seed.
    pub conditioned: Vec<f64>,
    pub zeroed: Vec<f64>,
}

/// Mean of the first and last tenth of a loss log.
pub fn decile_means(log: &[LogRow]) -> (f64, f64) {
    let k = (log.len() / 10).max(1);
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
    (mean(&log[..k]), mean(&log[log.len() - k..]))
}

/// Initialize and train one stage. Initialization, per-step noise and
/// batch order all derive from `seed`.
pub fn train_model(
    stage: Stage,
    dcfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    train: &TrainConfig,
    samples: &[TrainSample<f32>],
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<f32>> {
    let k = stage.index() as u64;
    let params = build_denoiser::<f32, _>(dcfg, &mut derive_rng(seed, "init", k))?;
    let cfg = TrainConfig { seed: derive_seed(seed, "train", k), ..train.clone() };
    let batches = BatchStream::new(samples, cfg.batch, derive_seed(seed, "batches", k));
    train_stage(stage, params, dcfg, sched, &cfg, batches, checkpoint_dir)
}

pub fn train_toy_stage(exp: &ToyExperiment, stage: Stage, windows: &[SceneWindow]) -> Result<(ParamSet<f32>, Vec<LogRow>)> {
    let cond = if stage == Stage::Completion { 3 } else { 0 };
    let samples = windows
        .iter()
        .map(|w| match stage {
            Stage::Uncertainty => stage1_sample(w, &exp.sensor),
            Stage::Completion => stage2_sample(w, &exp.sensor),
        })
        .collect::<Result<Vec<_>>>()?;
    let out = train_model(stage, &DenoiserConfig::toy(cond), &NoiseSchedule::default(), &exp.train, &samples, exp.seed, None)?;
    Ok((out.ema, out.log))
}

/// Stage-2 completion of a held-out window with and without its
/// uncertainty conditioning; returns the two mean Chamfer distances.
pub fn conditioning_gap(exp: &ToyExperiment, params: &ParamSet<f32>, held_out: &SceneWindow, seed: u64) -> Result<(f64, f64)> {
    let dcfg = DenoiserConfig::toy(3);
    let model = Denoiser { params, cfg: &dcfg };
    let sched = NoiseSchedule::default();
    let shape = [2, exp.frames, exp.sensor.height, exp.sensor.width];
    let cond = condition_of(held_out, &exp.sensor)?;
    let zeros = Tensor32::zeros(cond.shape());
    let reference: Vec<Vec<[f64; 3]>> =
        held_out.full.iter().map(|f| unproject(f, &exp.sensor).map(|c| c.xyz_f64())).collect::<Result<_>>()?;
    let score = |c: &Tensor32| -> Result<f64> {
        let mut rng = derive_rng(seed, "toy-sample", 0);
        let out = ddpm_sample(&model, &sched, &SamplerConfig::new(exp.sample_steps, SampleMode::Stochastic).clipped(), &shape, Some(c), false, &mut rng)?;
        let frames = decode_sequence(&out.x0, None, &exp.sensor, exp.min_depth)?;
        let mut total = 0.0;
        for (f, r) in frames.iter().zip(&reference) {
            total += frame_chamfer(&unproject(f, &exp.sensor)?.xyz_f64(), r)?;
        }
        Ok(total / frames.len() as f64)
    };
    Ok((score(&cond)?, score(&zeros)?))
}

pub fn run_toy_experiment(exp: &ToyExperiment) -> Result<ToyReport> {
    let train = synth_windows(&exp.sensor, exp.frames, exp.topk_ratio, exp.train_windows, exp.seed, "toy-train")?;
    let (_, stage1_log) = train_toy_stage(exp, Stage::Uncertainty, &train)?;
    let (p2, stage2_log) = train_toy_stage(exp, Stage::Completion, &train)?;
    let held = synth_windows(&exp.sensor, exp.frames, exp.topk_ratio, exp.eval_seeds, exp.seed, "toy-heldout")?;
    let pairs = held
        .par_iter()
        .enumerate()
        .map(|(k, w)| conditioning_gap(exp, &p2, w, derive_seed(exp.seed, "toy-eval", k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (conditioned, zeroed) = pairs.into_iter().unzip();
    Ok(ToyReport { stage1_log, stage2_log, conditioned, zeroed })
}
