mod commands;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qivc::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] qivc::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn kind(&self) -> (&'static str, u8) {
        use qivc::Error as E;
        match self {
            CliError::Config(_) => ("config", 2),
            CliError::Data(_) => ("data", 3),
            CliError::Core(e) => match e {
                E::Data(_) | E::Io(_) => ("data", 3),
                E::Numerical(_) | E::RankDeficient { .. } => ("numerical", 4),
                _ => ("config", 2),
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qivc", version, about = "Variational convolution networks for heart-sound classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one setting; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Segment cache
    #[arg(long, global = true)]
    cache: Option<PathBuf>,

    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Folds trained concurrently
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write a synthetic two-class WAV corpus and its manifest
    Synth,
    /// Filter, segment and normalize the manifest's recordings into a cache
    Preprocess,
    /// Cross-validated training
    Train,
    /// Recompute validation and test metrics from a checkpoint
    Eval,
    /// Test metrics under additive white noise at each SNR level
    Robustness,
    /// Reliability bins and expected calibration error
    Calibrate,
    /// Statistics of the rotated-ensemble noise sampler
    NoiseStats,
    /// First three bottleneck coordinates of every cached segment
    ExportLatent,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    let flags = [
        ("out_dir", cli.out.as_ref().map(|p| p.display().to_string())),
        ("manifest", cli.manifest.as_ref().map(|p| p.display().to_string())),
        ("cache", cli.cache.as_ref().map(|p| p.display().to_string())),
        ("checkpoint", cli.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("seed", cli.seed.map(|s| s.to_string())),
        ("jobs", cli.jobs.map(|j| j.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Robustness => commands::robustness(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::NoiseStats => commands::noise_stats(&cfg),
        Command::ExportLatent => commands::export_latent(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
