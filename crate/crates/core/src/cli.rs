//! `minexplain` command line.
//!
//! Exit codes: 0 success, 1 bad arguments or configuration, 2 I/O or weight
//! loading failure, 3 non-finite loss.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classifier::{fixture, load_classifier, ClassifierHandle};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageio;
use crate::objectives::LossWeights;
use crate::report::{write_report, Report, ReportOptions};
use crate::trainer::{explain_image, explain_images, ExplanationResult, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "minexplain", version, about = "Minimal pixel-mask explanations for image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one or more images.
    Explain(ExplainArgs),
    /// Run one explanation per loss-weight setting in a grid file.
    Sweep(SweepArgs),
    /// Train the tiny fixture classifier and write its weights.
    TrainFixture(TrainFixtureArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Classifier backend: `tiny-fixture` or `resnet18-imagenet`.
    #[arg(long)]
    pub model: Option<String>,
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trainer seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimisation steps (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Parallel explanation jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Input image (PNG or JPEG). Repeat for several images.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// JSON array of loss-weight objects; omitted fields take defaults.
    #[arg(long)]
    pub grid: PathBuf,
    /// Seeds averaged per grid point (`seed`, `seed + 1`, ...).
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainFixtureArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the safetensors blob.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => 3,
        Error::Io { .. } | Error::Format { .. } | Error::WeightsUnavailable(_) | Error::Tensor(_) => 2,
        Error::UnknownBackend(_)
        | Error::InvalidConfig(_)
        | Error::ShapeMismatch { .. }
        | Error::TapCountMismatch { .. }
        | Error::InvalidClassIndex { .. }
        | Error::DegenerateShape { .. }
        | Error::MissingSource(_) => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Explain(a) => cmd_explain(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::TrainFixture(a) => cmd_train_fixture(&a),
    }
}

/// Config file plus command-line overrides.
fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_model(common.model.as_deref().unwrap_or(crate::classifier::TINY_FIXTURE)),
    };
    if let Some(m) = &common.model {
        cfg.model.name = m.clone();
    }
    if let Some(s) = common.seed {
        cfg.trainer.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.trainer.steps = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if common.jobs == 0 {
        return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::InvalidConfig("no output directory: pass --out or set output_dir".into()))?;
    Ok((cfg, out))
}

fn load_inputs(handle: &ClassifierHandle, paths: &[PathBuf]) -> Result<Vec<crate::tensor::Image>> {
    let (h, w, _) = handle.input_shape();
    paths.iter().map(|p| imageio::load_image(p, (h, w), handle.device())).collect()
}

fn emit(cfg: &RunConfig, handle: &ClassifierHandle, result: &ExplanationResult, x: &crate::tensor::Image, dir: &Path) -> Result<()> {
    let report = Report::new(handle.identifier(), cfg.trainer.seed, &cfg.objectives, result, &result.metrics);
    let options = ReportOptions { overlay: cfg.report.overlay, loss_trace: cfg.report.loss_trace };
    write_report(&report, result, x, dir, options)?;
    cfg.save(&dir.join("config.json"))
}

fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let (cfg, out) = resolve(&args.common)?;
    let handle = load_classifier(&cfg.model)?;
    let images = load_inputs(&handle, &args.image)?;
    let results = explain_images(&handle, &images, &cfg.train_config(), args.common.jobs);
    let single = images.len() == 1;
    let mut first_err = None;
    for ((path, x), result) in args.image.iter().zip(&images).zip(results) {
        let dir = if single { out.clone() } else { out.join(path.file_stem().unwrap_or_default()) };
        match result.and_then(|r| emit(&cfg, &handle, &r, x, &dir).map(|_| r)) {
            Ok(r) => println!(
                "{}: y={} active_fraction={:.4} label_preserved={} robustness={:.3} necessity={:.3}",
                path.display(),
                r.y,
                r.metrics.active_fraction,
                r.metrics.label_preserved,
                r.metrics.robustness_rate,
                r.metrics.necessity_drop
            ),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

/// Metrics averaged over seeds for one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub active_fraction: f64,
    pub label_preserved: f64,
    pub robustness_rate: f64,
    pub necessity_drop: f64,
}

pub fn load_grid(path: &Path) -> Result<Vec<LossWeights>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid: Vec<LossWeights> = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: grid is empty", path.display())));
    }
    for w in &grid {
        w.validate(None)?;
    }
    Ok(grid)
}

/// Runs every `(grid point, seed)` pair and averages per grid point. The
/// first seed's mask of each point is returned for the gallery.
pub fn run_sweep(
    handle: &ClassifierHandle,
    x: &crate::tensor::Image,
    base: &TrainConfig,
    grid: &[LossWeights],
    seeds: usize,
    jobs: usize,
) -> Vec<Result<(SweepRow, crate::tensor::Mask)>> {
    let seeds = seeds.max(1);
    let cfgs: Vec<TrainConfig> = grid
        .iter()
        .flat_map(|w| {
            (0..seeds as u64).map(move |k| TrainConfig { weights: w.clone(), seed: base.seed.wrapping_add(k), ..base.clone() })
        })
        .collect();
    let jobs = jobs.clamp(1, cfgs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<ExplanationResult>>>> =
        cfgs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cfgs.len() {
                    break;
                }
                let r = explain_image(handle, x, &cfgs[i]);
                *slots[i].lock().expect("slot") = Some(r);
            });
        }
    });
    let mut results = slots.into_iter().map(|s| s.into_inner().expect("slot").expect("filled"));
    (0..grid.len())
        .map(|_| {
            let runs: Vec<Result<ExplanationResult>> = results.by_ref().take(seeds).collect();
            let mut ok = Vec::with_capacity(seeds);
            for r in runs {
                ok.push(r?);
            }
            let n = ok.len() as f64;
            let mean = |f: &dyn Fn(&ExplanationResult) -> f64| ok.iter().map(f).sum::<f64>() / n;
            let row = SweepRow {
                active_fraction: mean(&|r| r.metrics.active_fraction),
                label_preserved: mean(&|r| r.metrics.label_preserved as u8 as f64),
                robustness_rate: mean(&|r| r.metrics.robustness_rate),
                necessity_drop: mean(&|r| r.metrics.necessity_drop),
            };
            Ok((row, ok.swap_remove(0).mask))
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 16] = [
    "index",
    "lambda_act",
    "lambda_kl",
    "lambda_ce",
    "lambda_area",
    "lambda_bin",
    "lambda_tv",
    "lambda_rob",
    "alpha",
    "distance",
    "seeds",
    "active_fraction",
    "label_preserved",
    "robustness_rate",
    "necessity_drop",
    "status",
];

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let grid = load_grid(&args.grid)?;
    if args.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
    }
    let (cfg, out) = resolve(&args.common)?;
    let handle = load_classifier(&cfg.model)?;
    let x = imageio::load_image(&args.image, (handle.input_shape().0, handle.input_shape().1), handle.device())?;
    let gallery = out.join("gallery");
    std::fs::create_dir_all(&gallery).map_err(|e| Error::io(&gallery, e))?;
    let rows = run_sweep(&handle, &x, &cfg.train_config(), &grid, args.seeds, args.common.jobs);

    let csv_path = out.join("sweep.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let fmt = |e: csv::Error| Error::format(&csv_path, e);
    w.write_record(SWEEP_HEADER).map_err(fmt)?;
    for (i, (weights, row)) in grid.iter().zip(rows).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(weights.lambdas().iter().map(|v| v.to_string()));
        rec.push(weights.alpha.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"));
        rec.push(serde_json::to_value(weights.distance).expect("enum").as_str().unwrap_or_default().to_string());
        rec.push(args.seeds.to_string());
        match row {
            Ok((r, mask)) => {
                imageio::save_mask_png(&mask, &gallery.join(format!("mask_{i:03}.png")))?;
                for v in [r.active_fraction, r.label_preserved, r.robustness_rate, r.necessity_drop] {
                    rec.push(v.to_string());
                }
                rec.push("ok".into());
                println!("grid point {i}: active_fraction={:.4} label_preserved={:.2}", r.active_fraction, r.label_preserved);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 4));
                rec.push(format!("error: {e}"));
                eprintln!("grid point {i} failed: {e}");
            }
        }
        w.write_record(&rec).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    cfg.save(&out.join("config.json"))
}

fn cmd_train_fixture(args: &TrainFixtureArgs) -> Result<()> {
    let mut tc = fixture::FixtureTrainConfig::default();
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    let trained = fixture::train_fixture(args.seed, &tc)?;
    let bytes = trained.to_safetensors()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(&args.out).map_err(|e| Error::io(&args.out, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&args.out, e))?;
    println!("seed {}: held-out accuracy {:.4}, wrote {}", args.seed, trained.test_accuracy, args.out.display());
    Ok(())
}
