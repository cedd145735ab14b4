mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

/// Anomaly detection for multi-node, multi-modal sensor telemetry.
#[derive(Debug, Parser)]
#[command(name = "wsnad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over `OUTPUT_DIR` and the config.
    #[arg(long, env = "OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a clean synthetic corpus into `<out>/corpus`.
    Synth(Common),
    /// Inject the configured anomalies into the base corpus.
    Inject(Common),
    /// Convert IBRL readings and coordinates into a corpus.
    Ingest(Common),
    /// Self-supervised pretraining; writes the backbone checkpoint.
    Pretrain(Common),
    /// Fine-tune on next-step prediction from the saved backbone.
    Finetune(Common),
    /// Score the test split with the saved checkpoints.
    Detect(Common),
    /// Detect, plus the persistence baseline and a comparison.
    Eval(Common),
    /// Run ablation schemes and print the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Scheme ids to run, e.g. `--schemes 2,3,7`. Defaults to all seven.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<u8>,
    },
    /// Gradient check of the full backbone on a toy instance.
    Gradcheck(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => commands::synth(&c),
        Command::Inject(c) => commands::inject(&c),
        Command::Ingest(c) => commands::ingest(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Finetune(c) => commands::finetune(&c),
        Command::Detect(c) => commands::detect(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Ablate { common, schemes } => commands::ablate(&common, &schemes),
        Command::Gradcheck(c) => commands::gradcheck(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "missing" => 4,
            "data" => 5,
            "mismatch" => 6,
            "format" => 7,
            "io" => 8,
            "numeric" => 9,
            "check" => 10,
            _ => 1,
        }
    }
}
