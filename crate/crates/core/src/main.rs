use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use deinforeg::harness::{self, ExperimentConfig, ExperimentKind};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Gradprofile,
    NoiseSweep,
    AlphaSweep,
    Ablation,
    PipelineSim,
    Speedup,
    Gradcheck,
}

impl From<Command> for ExperimentKind {
    fn from(c: Command) -> Self {
        match c {
            Command::Train => ExperimentKind::Train,
            Command::Gradprofile => ExperimentKind::Gradprofile,
            Command::NoiseSweep => ExperimentKind::NoiseSweep,
            Command::AlphaSweep => ExperimentKind::AlphaSweep,
            Command::Ablation => ExperimentKind::Ablation,
            Command::PipelineSim => ExperimentKind::PipelineSim,
            Command::Speedup => ExperimentKind::Speedup,
            Command::Gradcheck => ExperimentKind::Gradcheck,
        }
    }
}

/// Decoupled module-wise training experiments.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment config; built-in defaults are used without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for decoupled training.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = cli.command.into();
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let out = harness::run(&cfg)?;
    harness::write_outputs(&out, &cli.out)?;
    for row in &out.summary {
        println!("{:<32} {:<22} {:.6} +- {:.6} (n={})", row.run, row.metric, row.mean, row.std, row.n);
    }
    Ok(())
}
