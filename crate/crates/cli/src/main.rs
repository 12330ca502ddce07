use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use exposim::config::RootConfig;
use exposim::io::{write_csv, write_json, write_pgm};
use exposim::reconstruct::MiniKpn;
use exposim::trainer::{
    evaluate, grid_oracle, load_model, train, Experiment, OracleConfig, OracleMerge, RunManifest, TrainOptions,
};
use exposim::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Simulate camera bursts, learn exposure schedules and evaluate them.
#[derive(Parser, Debug)]
#[command(name = "exposim", version)]
struct Cli {
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Capture one burst and write its frames, target and manifest.
    Simulate(SimulateArgs),
    /// Train exposure logits (and the kernel predictor).
    Train(TrainArgs),
    /// Exhaustively evaluate exposure splits on a grid.
    Oracle(OracleArgs),
    /// Compare a trained schedule against the uniform split and a single
    /// full-budget exposure.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides budget.frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Use the schedule of this training run instead of the initial one.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Required unless resuming.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Run directory (default: the configuration's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run in this directory from its last checkpoint.
    #[arg(long, conflicts_with_all = ["config", "out"])]
    resume: Option<PathBuf>,
    /// Overrides train.iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Stop after this many iterations, leaving the run resumable.
    #[arg(long, hide = true)]
    stop_after: Option<u64>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 21)]
    resolution: usize,
    /// Scene and noise draws per grid point.
    #[arg(long, default_value_t = 32)]
    draws: usize,
    /// Merge with this run's trained kernel predictor instead of averaging.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory holding the manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Scene family to evaluate on (default: the run's own).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    n_scenes: usize,
    /// Run whose kernel predictor merges the uniform bursts.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// CSV destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::Divergence(_) | Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> exposim::Result<RootConfig> {
    let mut cfg = RootConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_run(dir: &Path) -> exposim::Result<(RunManifest, Option<MiniKpn>)> {
    let manifest = RunManifest::load(dir)?;
    let model = load_model(dir, &manifest)?;
    Ok((manifest, model))
}

fn simulate(args: &SimulateArgs, seed: Option<u64>) -> exposim::Result<()> {
    let mut cfg = load_config(&args.config, seed)?;
    if let Some(n) = args.frames {
        cfg.budget.frames = n;
        cfg.train.initial_delta = None;
        cfg.validate()?;
    }
    let delta = match &args.run {
        Some(dir) => RunManifest::load(dir)?.schedule.delta_params,
        None => cfg.train.initial_delta.clone().unwrap_or_else(|| vec![0.0; cfg.budget.delta_dim()]),
    };
    let exp = Experiment::from_config(&cfg)?;
    let burst = exp.simulate(&delta, cfg.seed)?;
    let out = &args.out;
    let frame_code = exp.sensor.max_code() as u16;
    let mut frames = Vec::new();
    for (i, img) in burst.frames.iter().enumerate() {
        let name = format!("frame_{i:02}.pgm");
        write_pgm(&out.join(&name), img, frame_code)?;
        frames.push(json!({
            "file": name,
            "t_open_s": burst.schedule.t_opens_us[i] * 1e-6,
            "exposure_s": burst.schedule.dts_us[i] * 1e-6,
        }));
    }
    write_pgm(&out.join("ground_truth.pgm"), &burst.target, u16::MAX)?;
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "schedule": burst.schedule,
        "frames": frames,
        "ground_truth": "ground_truth.pgm",
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} frames to {}", burst.frames.len(), out.display());
    Ok(())
}

fn run_train(args: &TrainArgs, seed: Option<u64>) -> exposim::Result<()> {
    let (mut cfg, out, resume) = match &args.resume {
        Some(dir) => {
            let mut cfg = RunManifest::load(dir)?.config;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            (cfg, dir.clone(), true)
        }
        None => {
            let cfg = load_config(args.config.as_deref().expect("clap requires --config"), seed)?;
            let out = args
                .out
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no run directory: pass --out or set output_dir".into()))?;
            (cfg, out, false)
        }
    };
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    let opts = TrainOptions {
        out_dir: out.clone(),
        resume,
        stop_after: args.stop_after,
    };
    let manifest = train(&cfg, &opts, &mut |row| {
        println!(
            "iter={} loss={:.6} psnr={:.3} temperature={:.6} dts_us={}",
            row.iteration, row.loss, row.psnr, row.temperature, row.dts_us
        );
    })?;
    println!(
        "{:?} after {} iterations; manifest in {}",
        manifest.status,
        manifest.iterations_done,
        out.display()
    );
    Ok(())
}

fn oracle(args: &OracleArgs, seed: Option<u64>) -> exposim::Result<()> {
    let cfg = load_config(&args.config, seed)?;
    let exp = Experiment::from_config(&cfg)?;
    let merge = match &args.run {
        Some(dir) => match load_run(dir)?.1 {
            Some(m) => OracleMerge::Model(m),
            None => return Err(Error::Config(format!("{} has no kernel predictor", dir.display()))),
        },
        None => OracleMerge::AverageMerge,
    };
    let result = grid_oracle(
        &exp,
        &OracleConfig {
            resolution: args.resolution,
            draws: args.draws,
            seed: cfg.seed,
            merge,
        },
    )?;
    write_csv(&args.out.join("surface.csv"), &result.points)?;
    let best = result.best_point();
    let fractions = &result.fractions[result.best];
    let mut alphas = fractions.clone();
    if exp.budget.idle_slot {
        alphas.push((1.0 - fractions.iter().sum::<f64>()).max(0.0));
    }
    let argmin = json!({
        "resolution": args.resolution,
        "draws": args.draws,
        "points": result.points.len(),
        "alphas": alphas,
        "dts_us": best.dts_us,
        "loss_mean": best.loss_mean,
        "loss_se": best.loss_se,
        "psnr_mean": best.psnr_mean,
    });
    write_json(&args.out.join("argmin.json"), &argmin)?;
    println!(
        "{} grid points; best loss {:.6} +- {:.6} at dts_us={}",
        result.points.len(),
        best.loss_mean,
        best.loss_se,
        best.dts_us
    );
    Ok(())
}

fn eval(args: &EvalArgs, seed: Option<u64>) -> exposim::Result<()> {
    let (manifest, model) = load_run(&args.manifest)?;
    let mut cfg = match &args.config {
        Some(p) => RootConfig::load(p)?,
        None => manifest.config.clone(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.budget != manifest.config.budget {
        return Err(Error::Config("the evaluation budget differs from the one the run was trained on".into()));
    }
    let baseline = match &args.baseline {
        Some(dir) => load_run(dir)?.1,
        None => None,
    };
    let exp = Experiment::from_config(&cfg)?;
    let report = evaluate(
        &exp,
        &manifest.schedule.delta_params,
        model.as_ref(),
        baseline.as_ref(),
        args.n_scenes,
        cfg.seed,
    )?;
    match &args.out {
        Some(path) => write_csv(path, &report.summaries)?,
        None => print!("{}", exposim::io::csv_string(&report.summaries)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, cli.seed),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Oracle(a) => oracle(a, cli.seed),
        Command::Eval(a) => eval(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
