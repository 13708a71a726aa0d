use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

mod run;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    SolveN,
    SolveGraphon,
    ClosedForm,
    VerifyNash,
    Converge,
    GMap,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SolveN => "solve-n",
            Command::SolveGraphon => "solve-graphon",
            Command::ClosedForm => "closed-form",
            Command::VerifyNash => "verify-nash",
            Command::Converge => "converge",
            Command::GMap => "g-map",
        }
    }
}

/// Solve finite and graphon portfolio games on binomial lattices.
#[derive(Parser, Debug)]
#[command(name = "gnash", version)]
pub struct RunConfig {
    #[arg(value_enum)]
    pub command: Command,
    /// Game specification (JSON).
    #[arg(long = "spec")]
    pub spec_path: PathBuf,
    /// Directory for the result artifacts.
    #[arg(long = "out", default_value = ".")]
    pub out_dir: PathBuf,
    /// Overrides the specification's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-path override applied before validation, e.g. `agents.0.gamma=-1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn main() -> ExitCode {
    let config = RunConfig::parse();
    match run::run(&config) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gnash {}: {e}", config.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
