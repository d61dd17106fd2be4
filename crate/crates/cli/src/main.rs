//! `taskgap`: render corpora, train, evaluate, and run the consistency and
//! gradient checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use taskgap::config::RunConfig;
use taskgap::eval::{depth_metrics_synthetic, emit_difference_map, evaluate_oracle_metrics, evaluate_warp_metrics};
use taskgap::formats::decode_png;
use taskgap::geometry::Pose6D;
use taskgap::gradcheck::{run_suite, SUITE_TOLERANCE};
use taskgap::synthdata::{load_dataset, make_dataset, Split};
use taskgap::training::{run, Checkpoint, TrainData};
use taskgap::Error;

/// Log filter variable, e.g. `TASKGAP_LOG=debug`.
const LOG_ENV: &str = "TASKGAP_LOG";
const LOG_FILE: &str = "loss_log.csv";
const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Thresholds of the ground-truth warp check.
const ORACLE_MAX_PHOTO: f64 = 0.02;
const ORACLE_MAX_GEO: f64 = 0.01;
const PERTURBED_MIN_RATIO: f64 = 5.0;
const PERTURBATION_RAD: f64 = 0.2;

#[derive(Parser)]
#[command(name = "taskgap", version, about = "Task-guided domain gap reduction for monocular depth, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic and a real-style corpus.
    RenderData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; overrides `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train all networks on a rendered corpus.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory; overrides `paths.data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; overrides `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides both `train.seed` and `network.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Warp metrics on held-out real pairs and depth error on held-out synthetic frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that ground-truth depth and pose reproduce every real pair.
    WarpCheck {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every differentiable op and objective.
    Gradcheck {
        /// Random points per check.
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write an input / translation / difference panel for one image.
    Diffmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG.
        #[arg(long)]
        image: PathBuf,
        /// Output PNG; the raw difference is written next to it as PFM.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed run: the message and whether it was the user's input.
struct Failure {
    message: String,
    usage: bool,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            usage: e.is_usage(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        message: message.into(),
        usage: true,
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        message: message.into(),
        usage: false,
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    Ok(match &arg.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    })
}

fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{} is not a directory", path.display())))
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

fn render_data(cfg: RunConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = cfg;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let out = out
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set paths.data_dir"))?;
    cfg.paths.data_dir = Some(out.clone());
    cfg.validate()?;
    let ds = make_dataset(&cfg.data, &out)?;
    cfg.echo(&out)?;
    println!(
        "wrote {} synthetic frames and {} real pairs to {}",
        ds.synthetic.len(),
        ds.manifest.pairs.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, steps: Option<usize>, seed: Option<u64>, resume: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = cfg;
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.network.seed = s;
    }
    let data_dir = data
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| usage("no dataset: pass --data or set paths.data_dir"))?;
    let out = out
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or_else(|| usage("no run directory: pass --out or set paths.out_dir"))?;
    require_dir(&data_dir)?;
    cfg.paths.data_dir = Some(data_dir.clone());
    cfg.paths.out_dir = Some(out.clone());
    cfg.train.log_path = Some(out.join(LOG_FILE));
    cfg.train.checkpoint_path = Some(out.join(CHECKPOINT_FILE));
    cfg.validate()?;

    let ds = load_dataset(&data_dir)?;
    if ds.manifest.scene.resolution != cfg.network.resolution {
        return Err(usage(format!(
            "dataset resolution {} does not match network.resolution {}",
            ds.manifest.scene.resolution, cfg.network.resolution
        )));
    }
    let train_data = TrainData::from_dataset(&ds, Split::Train, &cfg.network)?;
    let mut checkpoint = match &resume {
        Some(path) => {
            require_file(path)?;
            let mut ck = Checkpoint::load(path)?;
            if ck.networks.config() != &cfg.network {
                return Err(usage("checkpoint network config differs from the run config"));
            }
            ck.config.steps = cfg.train.steps;
            ck.config.log_path = cfg.train.log_path.clone();
            ck.config.checkpoint_path = cfg.train.checkpoint_path.clone();
            cfg.train = ck.config.clone();
            ck
        }
        None => Checkpoint::new(&cfg.train, &cfg.network, &train_data)?,
    };
    let echo = cfg.echo(&out)?;
    info!("resolved config written to {}", echo.display());
    let start = checkpoint.step;
    let history = run(&mut checkpoint, &train_data, cfg.train.steps, |ck, r| {
        if ck.step % 100 == 0 {
            info!("step {}: total {:.6} photo {:.6} geo {:.6}", ck.step, r.total, r.photo, r.geo);
        }
        Ok(())
    })?;
    println!(
        "trained steps {}..{}; final total {}; checkpoint {}",
        start,
        checkpoint.step,
        history.last().map_or(f64::NAN, |r| r.total),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval(checkpoint: PathBuf, data: PathBuf, out: PathBuf) -> Result<(), Failure> {
    require_file(&checkpoint)?;
    require_dir(&data)?;
    let ck = Checkpoint::load(&checkpoint)?;
    let ds = load_dataset(&data)?;
    let pairs = ds.pairs(Split::Heldout);
    let report = evaluate_warp_metrics(&ck.networks, &pairs)?;
    report.write_csv(&out)?;
    let (mae, rmse) = depth_metrics_synthetic(&ck.networks, &ds.synthetic_samples(Split::Heldout))?;
    println!(
        "pairs {} (excluded {}): photo {:.5} ± {:.5}  geo {:.5} ± {:.5}  ssim {:.4} ± {:.4}",
        report.count, report.excluded, report.photo.mean, report.photo.std, report.geo.mean, report.geo.std, report.ssim.mean, report.ssim.std
    );
    println!("synthetic depth: mean abs error {mae:.5}, rmse {rmse:.5} (normalized units)");
    Ok(())
}

fn warp_check(data: PathBuf) -> Result<(), Failure> {
    require_dir(&data)?;
    let ds = load_dataset(&data)?;
    let mut pairs = ds.pairs(Split::Heldout);
    pairs.extend(ds.pairs(Split::Train));
    let oracle = evaluate_oracle_metrics(&pairs)?;
    let perturbed_pairs: Vec<_> = pairs
        .iter()
        .map(|p| {
            let mut q = p.clone();
            let mut r = q.relative_pose_gt.r;
            r[1] += PERTURBATION_RAD;
            q.relative_pose_gt = Pose6D::new(q.relative_pose_gt.t, r)?;
            Ok(q)
        })
        .collect::<Result<_, Error>>()?;
    let perturbed = evaluate_oracle_metrics(&perturbed_pairs)?;
    let ratio = perturbed.photo.mean / oracle.photo.mean;
    println!(
        "ground truth over {} pairs: photo {:.5}  geo {:.6}  ssim {:.4}; perturbed pose photo {:.5} ({:.1}x)",
        oracle.count, oracle.photo.mean, oracle.geo.mean, oracle.ssim.mean, perturbed.photo.mean, ratio
    );
    let ok = oracle.photo.mean < ORACLE_MAX_PHOTO && oracle.geo.mean < ORACLE_MAX_GEO && ratio >= PERTURBED_MIN_RATIO && oracle.excluded == 0;
    if ok {
        Ok(())
    } else {
        Err(runtime("ground-truth warp consistency check failed"))
    }
}

fn gradcheck(points: usize, seed: u64) -> Result<(), Failure> {
    if points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let results = run_suite(points, seed)?;
    let mut failed = 0;
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<40} {:.3e}  {mark}", r.name, r.max_rel_error);
        failed += usize::from(!r.passed());
    }
    if failed == 0 {
        println!("all {} checks below {SUITE_TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(runtime(format!("{failed} gradient checks failed")))
    }
}

fn diffmap(checkpoint: PathBuf, image: PathBuf, out: PathBuf) -> Result<(), Failure> {
    require_file(&checkpoint)?;
    require_file(&image)?;
    let ck = Checkpoint::load(&checkpoint)?;
    let bytes = std::fs::read(&image).map_err(|e| Error::Io { path: image.clone(), source: e })?;
    let img = decode_png(&bytes)?;
    let map = emit_difference_map(&ck.networks, &img, &out)?;
    println!("max difference {:.5}; wrote {} and {}", map.max, map.png_path.display(), map.pfm_path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::RenderData { config, out, seed } => render_data(load_config(&config)?, out, seed),
        Command::Train {
            config,
            data,
            out,
            steps,
            seed,
            resume,
        } => train(load_config(&config)?, data, out, steps, seed, resume),
        Command::Eval { checkpoint, data, out } => eval(checkpoint, data, out),
        Command::WarpCheck { data } => warp_check(data),
        Command::Gradcheck { points, seed } => gradcheck(points, seed),
        Command::Diffmap { checkpoint, image, out } => diffmap(checkpoint, image, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(if f.usage { 1 } else { 2 })
        }
    }
}
