use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use asyndiff::harness::{self, parse_overrides, Command, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    GenData,
    Train,
    Sample,
    EvalGaussian,
    EvalMask,
    ScheduleTrace,
}

impl From<Subcommand> for Command {
    fn from(s: Subcommand) -> Self {
        match s {
            Subcommand::GenData => Command::GenData,
            Subcommand::Train => Command::Train,
            Subcommand::Sample => Command::Sample,
            Subcommand::EvalGaussian => Command::EvalGaussian,
            Subcommand::EvalMask => Command::EvalMask,
            Subcommand::ScheduleTrace => Command::ScheduleTrace,
        }
    }
}

/// Asynchronous diffusion sampling experiments.
///
/// Any run-config key can be overridden as `--key value` after the
/// subcommand, e.g. `asyndiff sample --steps 50 --family quadratic`.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// Flat TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = parse_overrides(&cli.overrides).and_then(|o| RunConfig::resolve(cli.config.as_deref(), &o));
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if cli.print_config {
        print!("{}", config.to_toml());
        return ExitCode::SUCCESS;
    }
    match harness::run(cli.command.into(), &config) {
        Ok(outcome) if outcome.passed => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
