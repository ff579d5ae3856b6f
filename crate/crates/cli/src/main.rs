use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use augfpn::harness::gradcheck::gradcheck_all;
use augfpn::harness::parity::parity_check;
use augfpn::harness::stats::emit_stats;
use augfpn::harness::synth::{stream_seed, PARAM_STREAM};
use augfpn::harness::train::{train_toy, TrainReport, LOSS_CSV, RATIO_CSV};
use augfpn::harness::RunConfig;
use augfpn::{ParamStore, Real};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "augfpn", version, about = "Augmented feature-pyramid neck: checks, toy training and statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Floating-point width; overrides the configured precision.
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every op and the composed loss.
    Gradcheck(Common),
    /// Bitwise reductions to the plain FPN path and inference invariance.
    Parity(Common),
    /// Train on synthetic scenes; writes losses, ratio matrix and checkpoint.
    TrainToy(Common),
    /// Weight-ratio matrix of a checkpoint over a RoI file, as CSV.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rois: PathBuf,
    },
    /// Write parameters (a checkpoint or the seeded initialization) as AFT1
    /// tensors at the chosen precision.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = common.precision {
        cfg.precision = match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn gradcheck(common: &Common) -> Result<bool> {
    let cfg = run_config(common)?;
    let start = Instant::now();
    let report = gradcheck_all(cfg.seed)?;
    let text = report.render();
    print!("{text}");
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    write_text(common.out.as_deref(), "gradcheck.txt", &text)?;
    for f in report.failures() {
        eprintln!("gradient check failed: {}", f.name);
    }
    Ok(report.passed())
}

fn parity(common: &Common) -> Result<bool> {
    let cfg = run_config(common)?;
    let report = parity_check(cfg.seed)?;
    let text = report.render();
    print!("{text}");
    write_text(common.out.as_deref(), "parity.txt", &text)?;
    Ok(report.passed())
}

fn summarize<T>(report: &TrainReport<T>) {
    let first = report.initial_total();
    let last = report.trailing_total(50);
    println!(
        "steps {}  initial loss {first:.6}  trailing-50 mean {last:.6}  ratio {:.4}",
        report.losses.len(),
        last / first
    );
    if let Some(ratio) = &report.ratio {
        print!("{}", ratio.to_csv().replace("\r\n", "\n"));
    }
}

fn train(common: &Common) -> Result<bool> {
    let cfg = run_config(common)?;
    let out = common.out.as_deref();
    let start = Instant::now();
    match cfg.precision {
        32 => summarize(&train_toy::<f32>(&cfg, out)?),
        _ => summarize(&train_toy::<f64>(&cfg, out)?),
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if let Some(dir) = out {
        println!("wrote {} and {} under {}", LOSS_CSV, RATIO_CSV, dir.display());
    }
    Ok(true)
}

fn stats(common: &Common, checkpoint: &Path, rois: &Path) -> Result<bool> {
    let cfg = run_config(common)?;
    let matrix = emit_stats(&cfg, checkpoint, rois)?;
    let csv = matrix.to_csv();
    match common.out.as_deref() {
        Some(dir) => write_text(Some(dir), RATIO_CSV, &csv)?,
        None => print!("{csv}"),
    }
    Ok(true)
}

fn export_as<T: Real>(store: ParamStore<f64>, dir: &Path) -> Result<usize> {
    let cast: ParamStore<T> = store.cast();
    cast.save(dir)?;
    Ok(cast.len())
}

fn export(common: &Common, checkpoint: Option<&Path>) -> Result<bool> {
    let cfg = run_config(common)?;
    let Some(dir) = common.out.as_deref() else {
        bail!("export needs --out <dir>");
    };
    let store = match checkpoint {
        Some(path) => ParamStore::<f64>::load(path)?,
        None => cfg.model()?.init_params(stream_seed(cfg.seed, PARAM_STREAM)),
    };
    let count = match cfg.precision {
        32 => export_as::<f32>(store, dir)?,
        _ => export_as::<f64>(store, dir)?,
    };
    println!("exported {count} tensors to {}", dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gradcheck(c) => gradcheck(c),
        Command::Parity(c) => parity(c),
        Command::TrainToy(c) => train(c),
        Command::Stats { common, checkpoint, rois } => stats(common, checkpoint, rois),
        Command::Export { common, checkpoint } => export(common, checkpoint.as_deref()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
