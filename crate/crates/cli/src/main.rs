use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradlibra::loss::LossKind;
use gradlibra::telemetry::TelemetryMode;
use gradlibra_cli::{commands, exit, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "gradlibra",
    version,
    about = "Long-tailed loss experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test CSVs and dataset manifest for each seed.
    Generate(Common),
    /// Train the configured loss for each seed.
    Train(Common),
    /// Evaluate trained checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead of the ones under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare losses on paired seeds.
    Compare(Common),
    /// Sweep the positive and negative modulating factors.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Loss name (grad-libra, ce, focal, focal-star); repeat for compare.
    #[arg(long = "loss", value_parser = parse_loss)]
    losses: Vec<LossKind>,
    #[arg(long)]
    alpha_pos: Option<f64>,
    #[arg(long)]
    alpha_neg: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    telemetry_mode: Option<TelemetryMode>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: gradlibra::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<TelemetryMode, String> {
    s.parse().map_err(|e: gradlibra::Error| e.to_string())
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seeds: self.seeds.clone(),
            losses: self.losses.clone(),
            alpha_pos: self.alpha_pos,
            alpha_neg: self.alpha_neg,
            output_dir: self.out.clone(),
            telemetry_mode: self.telemetry_mode,
        });
        Ok(cfg)
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(c) => commands::generate(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval { common, checkpoint } => {
            for report in commands::eval(&common.resolve()?, checkpoint.as_deref())? {
                println!("{}", report.csv_row());
            }
            Ok(())
        }
        Command::Compare(c) => {
            let cfg = c.resolve()?;
            commands::compare(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.output_dir.join("comparison.csv")).unwrap_or_default()
            );
            Ok(())
        }
        Command::Sweep(c) => commands::sweep(&c.resolve()?).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
