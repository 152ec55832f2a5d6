//! Subcommands. Every artifact lands under `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use u4d_core::backbone::{predict, write_gate_telemetry, Mode};
use u4d_core::diffusion::{generate_4d, training_log_csv, GenerateConfig, NoiseSchedule, Stage};
use u4d_core::io::{read_logits, read_point_bin, read_range_container, write_logits, write_point_bin, write_range_container, RangeSequence};
use u4d_core::autodiff::ParamSet;
use u4d_core::geometry::project_points;
use u4d_core::metrics::report_csv;
use u4d_core::seed::{derive_rng, derive_seed};
use u4d_core::synth::synth_world;
use u4d_core::uncertainty::uncertainty_view_from_logits;
use u4d_core::{Result, U4dError};

use crate::config::{load_config, parse_config, RunConfig};
use crate::eval::{evaluate, frame_paths, read_set, write_poses, FeatureFiles};
use crate::pipeline::{stage1_sample, stage2_sample, synth_config, train_model, SceneWindow};
use crate::render::write_bev;

#[derive(Debug, Parser)]
#[command(name = "u4d", about = "Uncertainty-aware 4D LiDAR generation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (`section.key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize training and reference sequences.
    Synth(Common),
    /// Project synthesized frames to range images.
    Project(Common),
    /// Build top-K uncertainty views from per-point logits.
    Uncertainty(Common),
    /// Train the stage-1 (uncertainty view) denoiser.
    Train1(Common),
    /// Train the stage-2 (completion) denoiser.
    Train2(Common),
    /// Generate sequences with both stages.
    Sample(Common),
    /// Compare generated and reference sequence sets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Generated set (default `<out>/samples`).
        #[arg(long)]
        gen: Option<PathBuf>,
        /// Reference set (default `<out>/synth/ref`).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Top-down renders of frames.
    Render {
        #[command(flatten)]
        common: Common,
        /// A `.bin` frame, a sequence directory or a set directory
        /// (default `<out>/samples`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

const SPLITS: [&str; 2] = ["train", "ref"];

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let loaded = load_config(p)?;
            for w in &loaded.warnings {
                eprintln!("u4d: warning: {}", w);
            }
            loaded.config
        }
        None => parse_config("sensor.profile = toy\nrun.seed = 0\n")?.config,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn needs_config(common: &Common) -> Result<()> {
    if common.config.is_none() {
        return Err(U4dError::Usage("--config is required for this subcommand".into()));
    }
    Ok(())
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn seq_name(k: usize) -> String {
    format!("seq_{:04}", k)
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(U4dError::Input(format!("no sequences under {}", root.display())));
    }
    Ok(v)
}

fn containers(root: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "u4dr"))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(U4dError::Input(format!("no range containers under {}", root.display())));
    }
    Ok(v)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sc = synth_config(&cfg.sensor, cfg.frames);
    for (split, count) in SPLITS.iter().zip([cfg.train_sequences, cfg.ref_sequences]) {
        for k in 0..count {
            let s = synth_world(&sc, derive_seed(cfg.seed, &format!("synth-{}", split), k as u64))?;
            let dir = out.join("synth").join(split).join(seq_name(k));
            mkdir(&dir)?;
            let logits = s.logits.as_ref().expect("synthetic sequences carry logits");
            for (t, (frame, m)) in s.frames.iter().zip(logits).enumerate() {
                write_point_bin(frame, dir.join(format!("frame_{:02}.bin", t)))?;
                write_logits(m, dir.join(format!("frame_{:02}.lgt", t)))?;
            }
            let motion: Vec<_> = (0..s.frames.len() - 1).map(|t| s.relative_motion(t)).collect();
            write_poses(&dir.join("poses.csv"), &motion)?;
        }
    }
    Ok(())
}

fn project(cfg: &RunConfig, out: &Path) -> Result<()> {
    for split in SPLITS {
        let dst = out.join("range").join(split);
        mkdir(&dst)?;
        for dir in sequence_dirs(&out.join("synth").join(split))? {
            let mut frames = Vec::new();
            for p in frame_paths(&dir)? {
                frames.push(project_points(&read_point_bin(&p)?, &cfg.sensor).0);
            }
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            write_range_container(&RangeSequence::new(frames), dst.join(format!("{}.u4dr", name)))?;
        }
    }
    Ok(())
}

fn uncertainty(cfg: &RunConfig, out: &Path) -> Result<()> {
    for split in SPLITS {
        let dst = out.join("uncertainty").join(split);
        mkdir(&dst)?;
        for dir in sequence_dirs(&out.join("synth").join(split))? {
            let mut views = Vec::new();
            for p in frame_paths(&dir)? {
                let cloud = read_point_bin(&p)?;
                let m = read_logits(p.with_extension("lgt"), cloud.len())?;
                views.push(uncertainty_view_from_logits(&cloud, &m.data, m.cols, cfg.topk_ratio, &cfg.sensor)?.0);
            }
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            write_range_container(&RangeSequence::new(views), dst.join(format!("{}.u4dr", name)))?;
        }
    }
    Ok(())
}

fn training_windows(out: &Path, with_full: bool) -> Result<Vec<SceneWindow>> {
    let mut windows = Vec::new();
    for p in containers(&out.join("uncertainty").join("train"))? {
        let sparse = read_range_container(&p)?.frames;
        let full = if with_full {
            read_range_container(out.join("range").join("train").join(p.file_name().unwrap()))?.frames
        } else {
            Vec::new()
        };
        windows.push(SceneWindow { full, sparse });
    }
    Ok(windows)
}

fn train(cfg: &RunConfig, out: &Path, stage: Stage) -> Result<()> {
    let sensor = &cfg.sensor;
    let windows = training_windows(out, stage == Stage::Completion)?;
    let samples = windows
        .iter()
        .map(|w| match stage {
            Stage::Uncertainty => stage1_sample(w, sensor),
            Stage::Completion => stage2_sample(w, sensor),
        })
        .collect::<Result<Vec<_>>>()?;
    let dcfg = cfg.denoiser(if stage == Stage::Completion { 3 } else { 0 });
    let sched = NoiseSchedule::cosine(cfg.schedule_offset)?;
    let dir = out.join("model");
    let ckpt = dir.join("checkpoints");
    mkdir(&ckpt)?;
    let outcome = train_model(stage, &dcfg, &sched, &cfg.train, &samples, cfg.seed, Some(&ckpt))?;
    let n = stage.index();
    outcome.ema.save(dir.join(format!("stage{}.u4dp", n)))?;
    std::fs::write(dir.join(format!("stage{}_log.csv", n)), training_log_csv(&outcome.log))?;
    let probe = &samples[0];
    let mut rng = derive_rng(cfg.seed, "telemetry", n as u64);
    let pred = predict(&outcome.ema, &dcfg, &probe.x0, 0.5, probe.cond.as_ref(), Mode::Eval, &mut rng)?;
    write_gate_telemetry(dir.join(format!("stage{}_gates.csv", n)), &pred.gates)?;
    Ok(())
}

fn sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p1 = ParamSet::<f32>::load(out.join("model").join("stage1.u4dp"))?;
    let p2 = ParamSet::<f32>::load(out.join("model").join("stage2.u4dp"))?;
    let (c1, c2) = (cfg.denoiser(0), cfg.denoiser(3));
    let sched = NoiseSchedule::cosine(cfg.schedule_offset)?;
    let g = GenerateConfig {
        sensor: cfg.sensor.clone(),
        frames: cfg.frames,
        sampler: cfg.sample.sampler(),
        min_depth: cfg.sample.min_depth,
        zero_condition: false,
    };
    for k in 0..cfg.sample.count {
        let gen = generate_4d((&p1, &c1), (&p2, &c2), &sched, &g, derive_seed(cfg.seed, "sample", k as u64))?;
        let dir = out.join("samples").join(seq_name(k));
        mkdir(&dir)?;
        for (t, c) in gen.clouds.iter().enumerate() {
            write_point_bin(c, dir.join(format!("frame_{:02}.bin", t)))?;
        }
        write_range_container(&RangeSequence::new(gen.uncertainty_view), dir.join("uncertainty.u4dr"))?;
        write_range_container(&RangeSequence::new(gen.frames), dir.join("range.u4dr"))?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, gen: Option<PathBuf>, reference: Option<PathBuf>) -> Result<()> {
    let gen = gen.unwrap_or_else(|| out.join("samples"));
    let reference = reference.unwrap_or_else(|| out.join("synth").join("ref"));
    let (g, r) = (read_set(&gen)?, read_set(&reference)?);
    let pick = |cfgd: &Option<PathBuf>, root: &Path| cfgd.clone().or_else(|| Some(root.join("features.lgt")).filter(|p| p.exists()));
    let features = FeatureFiles { gen: pick(&cfg.gen_features, &gen), reference: pick(&cfg.ref_features, &reference) };
    let rows = evaluate(&g, &r, &cfg.metrics, cfg.sensor.max_depth, &features)?;
    mkdir(out)?;
    std::fs::write(out.join("metrics.csv"), report_csv(&rows))?;
    Ok(())
}

fn render(cfg: &RunConfig, out: &Path, input: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| out.join("samples"));
    let dst = out.join("render");
    mkdir(&dst)?;
    let (size, extent) = (cfg.render.size, cfg.render.extent);
    if input.is_file() {
        let stem = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        return write_bev(&read_point_bin(&input)?.xyz_f64(), size, extent, dst.join(format!("{}.ppm", stem)));
    }
    let dirs = if frame_paths(&input)?.is_empty() { sequence_dirs(&input)? } else { vec![input] };
    for dir in dirs {
        let seq = dir.file_name().unwrap().to_string_lossy().into_owned();
        for p in frame_paths(&dir)? {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            write_bev(&read_point_bin(&p)?.xyz_f64(), size, extent, dst.join(format!("{}_{}.ppm", seq, stem)))?;
        }
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            needs_config(&c)?;
            synth(&resolve(&c)?, &c.out)
        }
        Command::Project(c) => {
            needs_config(&c)?;
            project(&resolve(&c)?, &c.out)
        }
        Command::Uncertainty(c) => {
            needs_config(&c)?;
            uncertainty(&resolve(&c)?, &c.out)
        }
        Command::Train1(c) => {
            needs_config(&c)?;
            train(&resolve(&c)?, &c.out, Stage::Uncertainty)
        }
        Command::Train2(c) => {
            needs_config(&c)?;
            train(&resolve(&c)?, &c.out, Stage::Completion)
        }
        Command::Sample(c) => {
            needs_config(&c)?;
            sample(&resolve(&c)?, &c.out)
        }
        Command::Eval { common, gen, reference } => eval(&resolve(&common)?, &common.out, gen, reference),
        Command::Render { common, input } => render(&resolve(&common)?, &common.out, input),
    }
}

fn thread_pool() -> std::result::Result<rayon::ThreadPool, String> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("U4D_THREADS") {
        let n: usize = v.parse().map_err(|_| format!("U4D_THREADS must be a positive integer, got `{}`", v))?;
        if n == 0 {
            return Err("U4D_THREADS must be a positive integer, got `0`".into());
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| e.to_string())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse `argv` (program name first) and run; returns the exit code.
/// Errors go to stderr as a single `u4d: error kind=<kind>: <message>` line.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
            } else {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments");
                eprintln!("u4d: error kind=usage: {}", one_line(first.trim_start_matches("error: ")));
            }
            return code;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("u4d: error kind=config: {}", msg);
            return 1;
        }
    };
    match pool.install(|| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("u4d: error kind={}: {}", e.kind(), one_line(&e.to_string()));
            if matches!(e, U4dError::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
