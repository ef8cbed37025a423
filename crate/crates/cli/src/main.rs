use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rhythmlab::commands::{run_command, CommandSpec};
use rhythmlab::config::Config;

/// Dual-branch ECG/IEGM rhythm classification pipeline.
#[derive(Parser)]
#[command(name = "rhythmlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override config-file values;
/// environment variables are never consulted.
#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Individual configuration override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Random seed (shorthand for --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic synthetic records, annotations, and splits.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Read signal containers + annotations into a segments manifest.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Stratified train/val/test assignment over a segments manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Window, downsample, filter, and denoise into dataset files.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Window assignment file (windows.txt from `split` or `synth`).
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Upsample minority classes with augmented copies.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the classifier; writes per-epoch checkpoints and coefficients.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics, compactness, and similarity exports for a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Epoch directory or params.ckpt path.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export per-epoch similarity matrices from a training run.
    ExportCoeffs {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve_config(common: &Common) -> rhythmlab::Result<Config> {
    let mut config = Config::default();
    if let Some(path) = &common.config {
        config.load_file(path)?;
    }
    for item in &common.sets {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| rhythmlab::CliError::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (spec, common) = match cli.command {
        Command::Synth { out, common } => (CommandSpec::Synth { out }, common),
        Command::Ingest { input, out, common } => (CommandSpec::Ingest { input, out }, common),
        Command::Split { manifest, out, common } => (CommandSpec::Split { manifest, out }, common),
        Command::Preprocess { input, windows, out, common } => {
            (CommandSpec::Preprocess { input, windows, out }, common)
        }
        Command::Augment { data, out, common } => (CommandSpec::Augment { data, out }, common),
        Command::Train { train, val, out, common } => (CommandSpec::Train { train, val, out }, common),
        Command::Eval { data, model, out, common } => (CommandSpec::Eval { data, model, out }, common),
        Command::Gradcheck { out, common } => (CommandSpec::Gradcheck { out }, common),
        Command::ExportCoeffs { run, out, common } => (CommandSpec::ExportCoeffs { run, out }, common),
    };
    let config = match resolve_config(&common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run_command(&spec, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
