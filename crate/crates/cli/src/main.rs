mod config;
mod error;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{split_override, OUT_ENV};
use crate::error::{exit, Result};
use crate::run::RunDir;
use crate::stages::Ctx;

/// Simulate masked-AES traces, train a profiling MLP and recover the mask
/// shares from its activations.
#[derive(Debug, Parser)]
#[command(name = "maskscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `analysis.epoch`.
    #[arg(long, global = true)]
    epoch: Option<usize>,

    /// Overrides `analysis.layer`.
    #[arg(long, global = true)]
    layer: Option<usize>,

    /// Output root; wins over MASKSCOPE_OUT and `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_parser = split_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate profiling and attack traces with share sidecars.
    Simulate,
    /// Train the MLP and write checkpoints and pi_curve.csv.
    Train,
    /// Attack PI, accuracy and key rank of one checkpoint.
    Metrics,
    /// Per-class logit statistics.
    Logits,
    /// PCA basis and PC coordinates of one hidden layer.
    Pca,
    /// Linear probes on hidden activations.
    Probe,
    /// Patched forward passes and the rotation sweep.
    Patch,
    /// Per-trace share estimates from patched outputs.
    RecoverMasks,
    /// Score recovered shares against the ground-truth sidecar.
    Validate,
    /// Every stage in order.
    Pipeline,
}

fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(e) = cli.epoch {
        overrides.push(("analysis.epoch".into(), e.to_string()));
    }
    if let Some(l) = cli.layer {
        overrides.push(("analysis.layer".into(), l.to_string()));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.paths.out.clone());
    let ctx = Ctx {
        cfg,
        run: RunDir::new(root),
    };
    let _lock = ctx.run.lock()?;
    match cli.command {
        Command::Simulate => stages::simulate(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Metrics => stages::metrics(&ctx),
        Command::Logits => stages::logits(&ctx),
        Command::Pca => stages::pca(&ctx),
        Command::Probe => stages::probe(&ctx),
        Command::Patch => stages::patch(&ctx),
        Command::RecoverMasks => stages::recover_masks(&ctx),
        Command::Validate => stages::validate(&ctx),
        Command::Pipeline => stages::pipeline(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
