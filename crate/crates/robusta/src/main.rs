use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robusta::commands::Run;

/// Trains small image classifiers and scores their robustness and
/// attributions. All settings come from the configuration file.
#[derive(Parser)]
#[command(name = "robusta", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "robusta.toml")]
    config: PathBuf,
    /// Output directory [default: config `output_dir`, then $ROBUSTA_OUT].
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured model and write checkpoints and histories.
    Train,
    /// Write the safety report row of every model.
    Evaluate,
    /// Measure adversarial error under PGD.
    Attack,
    /// Certify the evaluation subset with IBP and CROWN-IBP.
    Verify,
    /// Export attribution maps of the evaluation subset.
    Attribute,
    /// Correlate entropy, drift and adversarial error across report rows.
    Correlate {
        /// Report CSVs, in addition to those listed in the config.
        reports: Vec<PathBuf>,
    },
    /// Sweep the entropy-penalty weight and record accuracy, drift and entropy.
    AblateLambda,
    /// Mean drift between IG maps under each pair of baselines.
    BaselineSensitivity,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Run::new(&cli.config, cli.out.as_deref()).and_then(|run| match &cli.command {
        Command::Train => run.train(),
        Command::Evaluate => run.evaluate(),
        Command::Attack => run.attack(),
        Command::Verify => run.verify(),
        Command::Attribute => run.attribute(),
        Command::Correlate { reports } => run.correlate(reports),
        Command::AblateLambda => run.ablate_lambda().map(drop),
        Command::BaselineSensitivity => run.baseline_sensitivity().map(drop),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
