//! The `bpam` command-line front end.
//!
//! Flags override values from an optional JSON `--config` file. Exit codes:
//! 0 success, 1 failed gradient check or diverged training, 2 any other error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::gradcheck::{check_pipeline, PipelineCheck};
use crate::imaging::{load_image, save_image, synthetic_image, BitDepth, Image};
use crate::metrics::MetricReport;
use crate::par;
use crate::producer::identity_model;
use crate::real::Real;
use crate::train::{recovery_experiment, train_toy, write_trace_csv, RecoverySetup, TrainConfig, TrainMode};
use crate::transform::{GridModel, Pipeline, PipelineConfig, StageTimings, TransformMode};

#[derive(Parser, Debug)]
#[command(name = "bpam", version, about = "Bilateral-grid pixel-adaptive MLP image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance one PNG with a stored model.
    Enhance(Common),
    /// Write identity grids and initialized guidance nets for an image size.
    Init(Common),
    /// Train on one input/target pair, or run the recovery experiment.
    TrainToy(Common),
    /// PSNR, SSIM and delta E between two PNGs.
    Eval(Common),
    /// Check every analytic gradient against finite differences.
    Gradcheck(Common),
    /// Time the pipeline at 1920x1080 and 3840x2160.
    Bench(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Affine,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Trainer {
    DirectGrids,
    Producer,
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// BPG1 grid file.
    #[arg(long)]
    grids: Option<PathBuf>,
    /// BPT1 tensor file with the guidance nets.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    decomposed: Option<Switch>,
    #[arg(long, value_parser = ["4", "8", "32"])]
    grid_ratio: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_enum)]
    align_centers: Option<Switch>,
    #[arg(long, env = "BPAM_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output bit depth for PNGs.
    #[arg(long, value_parser = ["8", "16"])]
    bits: Option<String>,
    /// Train the producer network instead of free grids.
    #[arg(long, value_enum)]
    trainer: Option<Trainer>,
    /// Run the ground-truth recovery experiment instead of training on files.
    #[arg(long)]
    recovery: bool,
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

/// Keys accepted in the JSON config file; all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    target: Option<PathBuf>,
    out: Option<PathBuf>,
    grids: Option<PathBuf>,
    weights: Option<PathBuf>,
    mode: Option<Mode>,
    decomposed: Option<bool>,
    grid_ratio: Option<usize>,
    depth: Option<usize>,
    align_centers: Option<bool>,
    threads: Option<usize>,
    seed: Option<u64>,
    iters: Option<usize>,
    lr_max: Option<f64>,
    lr_min: Option<f64>,
    precision: Option<u32>,
    bits: Option<u32>,
    trainer: Option<Trainer>,
}

/// Flags merged over the config file.
#[derive(Debug)]
struct RunConfig {
    pipeline: PipelineConfig,
    input: Option<PathBuf>,
    target: Option<PathBuf>,
    out: Option<PathBuf>,
    grids: Option<PathBuf>,
    weights: Option<PathBuf>,
    threads: Option<usize>,
    seed: Option<u64>,
    iters: Option<usize>,
    lr_max: f64,
    lr_min: f64,
    precision: u32,
    bits: BitDepth,
    trainer: TrainMode,
    recovery: bool,
    corrupt_backward: bool,
}

impl RunConfig {
    fn resolve(c: Common) -> Result<Self> {
        let file = match &c.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str::<FileConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let parse = |s: Option<String>| s.map(|v| v.parse::<usize>().expect("validated by clap"));
        let grid_ratio = parse(c.grid_ratio).or(file.grid_ratio).unwrap_or(8);
        if ![4, 8, 32].contains(&grid_ratio) {
            return Err(Error::Config(format!("grid ratio must be 4, 8 or 32, got {grid_ratio}")));
        }
        let mode = match c.mode.or(file.mode).unwrap_or(Mode::Mlp) {
            Mode::Affine => TransformMode::Affine,
            Mode::Mlp => TransformMode::Mlp,
        };
        let depth = c.depth.or(file.depth).unwrap_or(8);
        if depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        let pipeline = PipelineConfig {
            mode,
            decomposed: c.decomposed.map(Switch::on).or(file.decomposed).unwrap_or(true),
            grid_ratio,
            depth,
            downsample: PipelineConfig::default_downsample(grid_ratio),
            align_centers: c.align_centers.map(Switch::on).or(file.align_centers).unwrap_or(true),
        };
        let precision = parse(c.precision).map(|v| v as u32).or(file.precision).unwrap_or(32);
        if precision != 32 && precision != 64 {
            return Err(Error::Config(format!("precision must be 32 or 64, got {precision}")));
        }
        let bits = BitDepth::from_bits(parse(c.bits).map(|v| v as u32).or(file.bits).unwrap_or(8))?;
        let threads = c.threads.or(file.threads);
        if threads == Some(0) {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        let trainer = match c.trainer.or(file.trainer).unwrap_or(Trainer::DirectGrids) {
            Trainer::DirectGrids => TrainMode::DirectGrids,
            Trainer::Producer => TrainMode::Producer,
        };
        Ok(Self {
            pipeline,
            input: c.input.or(file.input),
            target: c.target.or(file.target),
            out: c.out.or(file.out),
            grids: c.grids.or(file.grids),
            weights: c.weights.or(file.weights),
            threads,
            seed: c.seed.or(file.seed),
            iters: c.iters.or(file.iters),
            lr_max: c.lr_max.or(file.lr_max).unwrap_or(3e-4),
            lr_min: c.lr_min.or(file.lr_min).unwrap_or(4e-6),
            precision,
            bits,
            trainer,
            recovery: c.recovery,
            corrupt_backward: c.corrupt_backward,
        })
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::arg(format!("--{flag} is required")))
}

/// Parses `args` (program name first) and runs the command; returns the exit
/// code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e @ Error::Training { .. }) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    let (name, common): (&str, Common) = match cli.command {
        Command::Enhance(c) => ("enhance", c),
        Command::Init(c) => ("init", c),
        Command::TrainToy(c) => ("train-toy", c),
        Command::Eval(c) => ("eval", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Bench(c) => ("bench", c),
    };
    let cfg = RunConfig::resolve(common)?;
    let threads = cfg.threads;
    let job = move || match name {
        "enhance" => cmd_enhance(&cfg),
        "init" => cmd_init(&cfg),
        "train-toy" => cmd_train_toy(&cfg),
        "eval" => cmd_eval(&cfg),
        "gradcheck" => cmd_gradcheck(&cfg),
        _ => cmd_bench(&cfg),
    };
    match threads {
        Some(n) => par::with_threads(n, job),
        None => job(),
    }
}

fn enhance_as<T: Real>(model: &GridModel<f32>, cfg: &PipelineConfig, img: &Image<f32>) -> Result<(Image<f32>, StageTimings)> {
    let pipe = Pipeline::new(cfg.clone(), model.cast::<T>())?;
    let (out, t) = pipe.enhance_timed(&img.cast::<T>())?;
    Ok((out.cast(), t))
}

fn print_timings(t: &StageTimings) {
    for (stage, ms) in t.as_millis() {
        println!("{stage:>9}: {ms:9.3} ms");
    }
    println!("{:>9}: {:9.3} ms", "total", t.total().as_secs_f64() * 1e3);
}

fn cmd_enhance(cfg: &RunConfig) -> Result<i32> {
    let input = require(&cfg.input, "input")?;
    let grids = require(&cfg.grids, "grids")?;
    let weights = require(&cfg.weights, "weights")?;
    let out = require(&cfg.out, "out")?;
    let model = GridModel::load(grids, weights)?;
    let img = load_image(input)?;
    let (result, timings) = if cfg.precision == 64 {
        enhance_as::<f64>(&model, &cfg.pipeline, &img)?
    } else {
        enhance_as::<f32>(&model, &cfg.pipeline, &img)?
    };
    save_image(&result, out, cfg.bits)?;
    print_timings(&timings);
    Ok(0)
}

fn cmd_init(cfg: &RunConfig) -> Result<i32> {
    let input = require(&cfg.input, "input")?;
    let grids = require(&cfg.grids, "grids")?;
    let weights = require(&cfg.weights, "weights")?;
    let img = load_image(input)?;
    let geom = cfg.pipeline.geometry_for(img.height(), img.width())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let model: GridModel<f32> = identity_model(&cfg.pipeline, geom, &mut rng);
    model.save(grids, weights, None)?;
    println!(
        "wrote {}x{}x{} identity grids for a {}x{} image",
        geom.grid_h,
        geom.grid_w,
        geom.depth,
        img.height(),
        img.width()
    );
    Ok(0)
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        pipeline: cfg.pipeline.clone(),
        mode: cfg.trainer,
        iters: cfg.iters.unwrap_or(2000),
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        seed,
        ..TrainConfig::default()
    }
}

fn cmd_train_toy(cfg: &RunConfig) -> Result<i32> {
    let seed = cfg.seed.ok_or_else(|| Error::arg("--seed is required for training"))?;
    if cfg.precision != 32 {
        return Err(Error::Config("training runs in 32-bit precision".into()));
    }
    let out_dir = require(&cfg.out, "out")?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = train_config(cfg, seed);

    if cfg.recovery {
        let setup = RecoverySetup {
            train,
            ..RecoverySetup::default()
        };
        let report = recovery_experiment(&setup)?;
        write_trace_csv(&report.trace, out_dir.join("loss.csv"))?;
        println!("initial PSNR {:.3} dB", report.initial_psnr);
        println!("final PSNR   {:.3} dB", report.final_psnr);
        println!("loss@0 {:.6e}  loss@500 {:.6e}", report.loss_at(0), report.loss_at(500));
        return Ok(0);
    }

    let input = load_image(require(&cfg.input, "input")?)?;
    let target = load_image(require(&cfg.target, "target")?)?;
    let outcome = train_toy(&input, &target, &train, None)?;
    let mut extra = crate::container::TensorFile::new();
    if let Some(p) = &outcome.producer {
        p.write_tensors(&mut extra, "producer");
    }
    outcome
        .model
        .save(out_dir.join("grids.bpg"), out_dir.join("weights.bpt"), Some(&extra))?;
    write_trace_csv(&outcome.trace, out_dir.join("loss.csv"))?;
    let last = outcome.final_row();
    println!(
        "step {}: mse {:.6e} ssim-loss {:.6e} total {:.6e}",
        last.step, last.mse, last.ssim, last.total
    );
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig) -> Result<i32> {
    let a = load_image(require(&cfg.input, "input")?)?;
    let b = load_image(require(&cfg.target, "target")?)?;
    let report = MetricReport::evaluate(&a.cast::<f64>(), &b.cast::<f64>())?;
    println!("{report}");
    if let Some(out) = &cfg.out {
        write_atomic(out, |f| writeln!(f, "{}\n{}", MetricReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    // Finite differences need 64-bit; --precision does not apply here.
    let check = PipelineCheck {
        pipeline: PipelineConfig {
            mode: cfg.pipeline.mode,
            decomposed: cfg.pipeline.decomposed,
            align_centers: cfg.pipeline.align_centers,
            ..PipelineCheck::default().pipeline
        },
        corrupt_backward: cfg.corrupt_backward,
        ..PipelineCheck::default()
    };
    let report = check_pipeline(&check, cfg.seed.unwrap_or(0))?;
    println!("64-bit gradient check, instance found after {} draw(s)", report.attempts);
    println!("{:<10} {:>7} {:>12}  worst", "group", "probes", "max_rel_err");
    for g in report.report.groups() {
        println!(
            "{:<10} {:>7} {:>12.3e}  analytic {:.9e} numeric {:.9e}",
            g.name, g.probes, g.max_rel_err, g.analytic, g.numeric
        );
    }
    if report.passed() {
        println!("PASS (max rel err {:.3e} < {:.0e})", report.report.max_rel_err(), report.tolerance);
        Ok(0)
    } else {
        let w = report.report.worst().expect("at least one tensor");
        println!(
            "FAIL: {}[{}] rel err {:.3e} (analytic {:.9e}, numeric {:.9e})",
            w.name, w.worst_index, w.max_rel_err, w.analytic, w.numeric
        );
        Ok(1)
    }
}

/// Random model for timing: identity grids plus noise, random guidance nets.
fn bench_model(cfg: &PipelineConfig, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<GridModel<f32>> {
    let geom = cfg.geometry_for(h, w)?;
    let mut model: GridModel<f32> = identity_model(cfg, geom, rng);
    let mut noise = |v: &mut [f32]| v.iter_mut().for_each(|x| *x += 0.05 * rng.sample::<f32, _>(StandardNormal));
    noise(model.grid1.cells_mut());
    if let Some(g) = &mut model.grid2 {
        noise(g.cells_mut());
    }
    for net in std::iter::once(&mut model.gnet1).chain(model.gnet2.as_mut()) {
        noise(&mut net.w2);
    }
    Ok(model)
}

pub const BENCH_RESOLUTIONS: [(usize, usize); 2] = [(1080, 1920), (2160, 3840)];
pub const BENCH_WARMUP: usize = 5;
pub const BENCH_RUNS: usize = 100;

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub resolution: String,
    pub stage: &'static str,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub fps: f64,
}

pub const BENCH_HEADER: &str = "resolution,stage,mean_ms,min_ms,fps";

/// Times `runs` enhancements after `warmup` untimed ones at each resolution.
pub fn run_bench(cfg: &PipelineConfig, seed: u64, warmup: usize, runs: usize) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (h, w) in BENCH_RESOLUTIONS {
        let img = synthetic_image(h, w, seed);
        let pipe = Pipeline::new(cfg.clone(), bench_model(cfg, h, w, &mut rng)?)?;
        for _ in 0..warmup {
            pipe.enhance(&img)?;
        }
        let mut samples: Vec<[f64; 7]> = Vec::with_capacity(runs);
        for _ in 0..runs.max(1) {
            let start = Instant::now();
            let (_, t) = pipe.enhance_timed(&img)?;
            let wall = start.elapsed().as_secs_f64() * 1e3;
            let ms = t.as_millis();
            samples.push([ms[0].1, ms[1].1, ms[2].1, ms[3].1, ms[4].1, t.total().as_secs_f64() * 1e3, wall]);
        }
        let names = ["guidance", "slice1", "mlp1", "slice2", "mlp2", "total", "wall"];
        for (i, stage) in names.into_iter().enumerate() {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / samples.len() as f64;
            let min = samples.iter().map(|s| s[i]).fold(f64::INFINITY, f64::min);
            rows.push(BenchRow {
                resolution: format!("{w}x{h}"),
                stage,
                mean_ms: mean,
                min_ms: min,
                fps: if mean > 0.0 { 1000.0 / mean } else { f64::INFINITY },
            });
        }
    }
    Ok(rows)
}

fn cmd_bench(cfg: &RunConfig) -> Result<i32> {
    let runs = cfg.iters.unwrap_or(BENCH_RUNS);
    let rows = run_bench(&cfg.pipeline, cfg.seed.unwrap_or(0), BENCH_WARMUP, runs)?;
    println!("threads: {}, runs: {runs}", par::current_threads());
    println!("{:<10} {:<9} {:>10} {:>10} {:>9}", "resolution", "stage", "mean ms", "min ms", "FPS");
    for r in &rows {
        println!(
            "{:<10} {:<9} {:>10.2} {:>10.2} {:>9.2}",
            r.resolution, r.stage, r.mean_ms, r.min_ms, r.fps
        );
    }
    if let Some(out) = &cfg.out {
        write_atomic(out, |f| {
            writeln!(f, "{BENCH_HEADER}")?;
            for r in &rows {
                writeln!(f, "{},{},{:.4},{:.4},{:.4}", r.resolution, r.stage, r.mean_ms, r.min_ms, r.fps)?;
            }
            Ok(())
        })?;
    }
    Ok(0)
}
