use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnfd::{Error, Result};
use attnfd_cli::commands;
use attnfd_cli::config::RunConfig;
use clap::{Args, Parser, Subcommand};

/// Attention-guided feature distillation on synthetic segmentation scenes.
///
/// Exit codes: 0 success, 2 usage, 3 config, 4 io, 5 checkpoint, 6 data,
/// 7 shape, 8 diverged, 9 internal.
#[derive(Parser)]
#[command(name = "attnfd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value run configuration; defaults fill missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the run seed (teacher.seed for train-teacher)
    #[arg(long)]
    seed: Option<u64>,
    /// extra key=value overrides, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured train and val scenes with manifests
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and calibrate a teacher
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student against a teacher checkpoint
    Distill {
        #[command(flatten)]
        common: Common,
        /// not needed for method=none
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// accept a teacher trained under a different configuration
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest or the configured val split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention heatmaps for one PPM image
    VizAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and std over run directories, grouped by method and taps
    Aggregate {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(c: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got \"{kv}\"")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.set_seed(seed_key, s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("AFD_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
            Error::Config(format!("AFD_THREADS={v}: expected a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("AFD_THREADS: {e}")))
}

fn by_precision(
    cfg: &RunConfig,
    f64_run: impl FnOnce() -> Result<String>,
    f32_run: impl FnOnce() -> Result<String>,
) -> Result<String> {
    match cfg.precision()? {
        32 => f32_run(),
        _ => f64_run(),
    }
}

fn run(cli: Cli) -> Result<String> {
    configure_threads()?;
    match cli.command {
        Command::GenData { common, out } => {
            commands::gen_data(&load_config(&common, "data.seed")?, &out)
        }
        Command::TrainTeacher { common, out } => {
            let cfg = load_config(&common, "teacher.seed")?;
            by_precision(
                &cfg,
                || commands::train_teacher::<f64>(&cfg, &out),
                || commands::train_teacher::<f32>(&cfg, &out),
            )
        }
        Command::Distill {
            common,
            teacher,
            force,
            out,
        } => {
            let cfg = load_config(&common, "seed")?;
            let t = teacher.as_deref();
            by_precision(
                &cfg,
                || commands::distill::<f64>(&cfg, t, force, &out),
                || commands::distill::<f32>(&cfg, t, force, &out),
            )
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            out,
        } => commands::eval(
            &load_config(&common, "seed")?,
            &checkpoint,
            manifest.as_deref(),
            out.as_deref(),
        ),
        Command::VizAttn {
            checkpoint,
            image,
            out,
        } => {
            let maps = commands::viz_attn(&checkpoint, &image, &out)?;
            for w in &maps.warnings {
                eprintln!("warning: {w}");
            }
            Ok(format!(
                "wrote {} heatmaps to {}\n",
                maps.written.len(),
                out.display()
            ))
        }
        Command::Aggregate { runs, out } => {
            commands::aggregate(&runs, out.as_deref().map(Path::new))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, category) = attnfd_cli::exit_code(&e);
            eprintln!("error[{category}]: {e}");
            ExitCode::from(code as u8)
        }
    }
}
