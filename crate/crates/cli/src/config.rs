//! Flat `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use u4d_core::backbone::DenoiserConfig;
use u4d_core::diffusion::{SampleMode, SamplerConfig, TrainConfig};
use u4d_core::{Result, SensorConfig, U4dError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorProfile {
    Nuscenes,
    Kitti,
    Toy,
}

impl SensorProfile {
    pub fn name(self) -> &'static str {
        match self {
            SensorProfile::Nuscenes => "nuscenes",
            SensorProfile::Kitti => "kitti",
            SensorProfile::Toy => "toy",
        }
    }
}

impl FromStr for SensorProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nuscenes" => Ok(SensorProfile::Nuscenes),
            "kitti" => Ok(SensorProfile::Kitti),
            "toy" => Ok(SensorProfile::Toy),
            _ => Err(format!("unknown sensor profile `{}` (nuscenes, kitti, toy)", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelProfile {
    Toy,
    Paper,
}

impl FromStr for ModelProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(ModelProfile::Toy),
            "paper" => Ok(ModelProfile::Paper),
            _ => Err(format!("unknown model profile `{}` (toy, paper)", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSettings {
    pub count: usize,
    pub steps: usize,
    pub min_depth: f64,
    pub stochastic: bool,
    pub clip: bool,
}

impl SampleSettings {
    pub fn sampler(&self) -> SamplerConfig {
        let mode = if self.stochastic { SampleMode::Stochastic } else { SampleMode::DeterministicZeroNoise };
        SamplerConfig { steps: self.steps, mode, clip_denoised: self.clip }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSettings {
    pub bev_extent: f64,
    pub bev_bins: usize,
    pub ece_bins: usize,
    pub intervals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub size: usize,
    pub extent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: SensorProfile,
    pub sensor: SensorConfig,
    /// `(up, down)` field of view as configured, degrees.
    pub fov_deg: (f64, f64),
    pub frames: usize,
    pub train_sequences: usize,
    pub ref_sequences: usize,
    pub topk_ratio: f64,
    pub model: ModelProfile,
    pub schedule_offset: f64,
    pub train: TrainConfig,
    pub sample: SampleSettings,
    pub metrics: MetricSettings,
    pub render: RenderSettings,
    /// Optional per-set feature files for the range-image Fréchet row.
    pub gen_features: Option<PathBuf>,
    pub ref_features: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn denoiser(&self, cond_channels: usize) -> DenoiserConfig {
        match self.model {
            ModelProfile::Toy => DenoiserConfig::toy(cond_channels),
            ModelProfile::Paper => DenoiserConfig::paper(cond_channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(U4dError::Range(format!("topk.ratio must be in (0, 1], got {}", self.topk_ratio)));
        }
        if self.frames == 0 {
            return Err(U4dError::Range("data.frames must be at least 1".into()));
        }
        if self.train_sequences == 0 || self.ref_sequences == 0 {
            return Err(U4dError::Range("data.train_sequences and data.ref_sequences must be at least 1".into()));
        }
        self.train.validate()?;
        self.denoiser(0).check_dims(self.sensor.height, self.sensor.width)?;
        if self.sample.count == 0 || self.sample.steps == 0 {
            return Err(U4dError::Range("sample.count and sample.steps must be at least 1".into()));
        }
        if !(self.metrics.bev_extent > 0.0) || self.metrics.bev_bins == 0 || self.metrics.ece_bins == 0 {
            return Err(U4dError::Range("metrics.bev_extent, metrics.bev_bins and metrics.ece_bins must be positive".into()));
        }
        if self.metrics.intervals.is_empty() || self.metrics.intervals.contains(&0) {
            return Err(U4dError::Range("metrics.intervals must be a nonempty list of positive gaps".into()));
        }
        if self.render.size == 0 || !(self.render.extent > 0.0) {
            return Err(U4dError::Range("render.size and render.extent must be positive".into()));
        }
        for (key, p) in [("paths.gen_features", &self.gen_features), ("paths.ref_features", &self.ref_features)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(U4dError::Config(format!("{} = {} does not exist", key, p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Parsed configuration plus any keys that were not recognized.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((raw, line)) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| U4dError::Config(format!("line {}: {}: cannot parse `{}`: {}", line, key, raw, e))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)?.ok_or_else(|| U4dError::Config(format!("missing required key {}", key)))
    }
}

fn parse_list(raw: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    raw.split(',').map(|s| s.trim().parse()).collect()
}

pub fn parse_config(text: &str) -> Result<Loaded> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(U4dError::Config(format!("line {}: expected `section.key = value`", line_no)));
        };
        let (key, value) = (key.trim(), value.trim());
        let valid_key = key.split_once('.').is_some_and(|(s, k)| {
            !s.is_empty() && !k.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        });
        if !valid_key {
            return Err(U4dError::Config(format!("line {}: malformed key `{}`", line_no, key)));
        }
        if map.insert(key.to_string(), (value.to_string(), line_no)).is_some() {
            return Err(U4dError::Config(format!("line {}: duplicate key {}", line_no, key)));
        }
    }
    let mut e = Entries { map };

    let profile: SensorProfile = e.required("sensor.profile")?;
    let (h, w, up, down) = match profile {
        SensorProfile::Nuscenes => (32, 1024, 10.0, -30.0),
        SensorProfile::Kitti => (64, 1024, 3.0, -25.0),
        SensorProfile::Toy => (16, 64, 10.0, -30.0),
    };
    let fov_deg = (e.or("sensor.fov_up", up)?, e.or("sensor.fov_down", down)?);
    let sensor = SensorConfig::new(
        e.or("sensor.height", h)?,
        e.or("sensor.width", w)?,
        fov_deg.0,
        fov_deg.1,
        e.or("sensor.max_depth", 80.0)?,
    )?;

    let d = TrainConfig::default();
    let train = TrainConfig {
        steps: e.or("train.steps", d.steps)?,
        batch: e.or("train.batch", d.batch)?,
        lr: e.or("train.lr", d.lr)?,
        warmup: e.or("train.warmup", d.warmup)?,
        weight_decay: e.or("train.weight_decay", d.weight_decay)?,
        ema_decay: e.or("train.ema_decay", d.ema_decay)?,
        ema_every: e.or("train.ema_every", d.ema_every)?,
        lambda_mask: e.or("train.lambda_mask", d.lambda_mask)?,
        gamma_reg: e.or("train.gamma_reg", d.gamma_reg)?,
        checkpoint_every: e.or("train.checkpoint_every", d.checkpoint_every)?,
        seed: 0,
    };
    let intervals = match e.map.remove("metrics.intervals") {
        None => vec![1],
        Some((raw, line)) => parse_list(&raw)
            .map_err(|err| U4dError::Config(format!("line {}: metrics.intervals: cannot parse `{}`: {}", line, raw, err)))?,
    };
    let gen_features: Option<String> = e.take("paths.gen_features")?;
    let ref_features: Option<String> = e.take("paths.ref_features")?;

    let config = RunConfig {
        profile,
        sensor,
        fov_deg,
        frames: e.or("data.frames", 2)?,
        train_sequences: e.or("data.train_sequences", 8)?,
        ref_sequences: e.or("data.ref_sequences", 2)?,
        topk_ratio: e.or("topk.ratio", 0.2)?,
        model: e.or("model.profile", ModelProfile::Toy)?,
        schedule_offset: e.or("diffusion.schedule_offset", 0.008)?,
        train,
        sample: SampleSettings {
            count: e.or("sample.count", 2)?,
            steps: e.or("sample.steps", 256)?,
            min_depth: e.or("sample.min_depth", 0.5)?,
            stochastic: e.or("sample.stochastic", true)?,
            clip: e.or("sample.clip", true)?,
        },
        metrics: MetricSettings {
            bev_extent: e.or("metrics.bev_extent", 80.0)?,
            bev_bins: e.or("metrics.bev_bins", 100)?,
            ece_bins: e.or("metrics.ece_bins", 15)?,
            intervals,
        },
        render: RenderSettings { size: e.or("render.size", 256)?, extent: e.or("render.extent", 40.0)? },
        gen_features: gen_features.map(PathBuf::from),
        ref_features: ref_features.map(PathBuf::from),
        seed: e.required("run.seed")?,
    };
    let warnings = e.map.iter().map(|(k, (_, line))| format!("line {}: unknown key {}", line, k)).collect();
    config.validate()?;
    Ok(Loaded { config, warnings })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| U4dError::Config(format!("{} is not UTF-8", path.display())))?;
    parse_config(&text)
}

/// Every field, one key per line, in a form `parse_config` reads back.
pub fn dump_config(c: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{} = {}", k, v);
    };
    kv("run.seed", c.seed.to_string());
    kv("sensor.profile", c.profile.name().into());
    kv("sensor.height", c.sensor.height.to_string());
    kv("sensor.width", c.sensor.width.to_string());
    kv("sensor.fov_up", c.fov_deg.0.to_string());
    kv("sensor.fov_down", c.fov_deg.1.to_string());
    kv("sensor.max_depth", c.sensor.max_depth.to_string());
    kv("data.frames", c.frames.to_string());
    kv("data.train_sequences", c.train_sequences.to_string());
    kv("data.ref_sequences", c.ref_sequences.to_string());
    kv("topk.ratio", c.topk_ratio.to_string());
    kv("model.profile", if c.model == ModelProfile::Toy { "toy" } else { "paper" }.into());
    kv("diffusion.schedule_offset", c.schedule_offset.to_string());
    let t = &c.train;
    kv("train.steps", t.steps.to_string());
    kv("train.batch", t.batch.to_string());
    kv("train.lr", t.lr.to_string());
    kv("train.warmup", t.warmup.to_string());
    kv("train.weight_decay", t.weight_decay.to_string());
    kv("train.ema_decay", t.ema_decay.to_string());
    kv("train.ema_every", t.ema_every.to_string());
    kv("train.lambda_mask", t.lambda_mask.to_string());
    kv("train.gamma_reg", t.gamma_reg.to_string());
    kv("train.checkpoint_every", t.checkpoint_every.to_string());
    kv("sample.count", c.sample.count.to_string());
    kv("sample.steps", c.sample.steps.to_string());
    kv("sample.min_depth", c.sample.min_depth.to_string());
    kv("sample.stochastic", c.sample.stochastic.to_string());
    kv("sample.clip", c.sample.clip.to_string());
    kv("metrics.bev_extent", c.metrics.bev_extent.to_string());
    kv("metrics.bev_bins", c.metrics.bev_bins.to_string());
    kv("metrics.ece_bins", c.metrics.ece_bins.to_string());
    kv("metrics.intervals", c.metrics.intervals.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","));
    kv("render.size", c.render.size.to_string());
    kv("render.extent", c.render.extent.to_string());
    if let Some(p) = &c.gen_features {
        kv("paths.gen_features", p.display().to_string());
    }
    if let Some(p) = &c.ref_features {
        kv("paths.ref_features", p.display().to_string());
    }
    s
}
