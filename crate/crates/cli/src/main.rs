use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossdiff_cli::config::{self, Flags};
use crossdiff_cli::{commands, CliError};

#[derive(Parser)]
#[command(
    name = "crossdiff",
    version,
    about = "Entropy-diminishing finite volumes for cross-diffusion systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-step one case and write diagnostics and snapshots.
    Run(Common),
    /// Grid refinement study, writes eoc.csv.
    Convergence(Common),
    /// Error as a function of a*, writes astar_sweep.csv.
    Sweep(Common),
    /// Check the mass-action model on random compositions.
    ValidateReaction {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Preset name, e.g. A_reg_smooth or reactive_2d.
    #[arg(long)]
    case: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a snapshot every n steps (0: first and last only).
    #[arg(long)]
    stride: Option<usize>,
    /// Order-independent summation for bit-stable output.
    #[arg(long)]
    reproducible: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn flags(&self) -> Flags {
        Flags {
            case: self.case.clone(),
            config: self.config.clone(),
            out: self.out.clone(),
            stride: self.stride,
            reproducible: self.reproducible,
            seed: self.seed,
        }
    }
}

fn validate_reaction(
    common: &Common,
    samples: Option<usize>,
) -> Result<serde_json::Value, CliError> {
    let flags = common.flags();
    if flags.case.is_none() && flags.config.is_none() {
        let out = flags
            .out
            .unwrap_or_else(|| PathBuf::from("out/validate-reaction"));
        return commands::validate_reaction(
            None,
            samples.unwrap_or(10_000),
            flags.seed.unwrap_or(0),
            &out,
        );
    }
    let cfg = config::resolve(&flags, "out")?;
    let samples = samples.or(cfg.file.validation.samples).unwrap_or(10_000);
    commands::validate_reaction(Some(&cfg.case), samples, cfg.seed, &cfg.out)
}

fn dispatch(cli: &Cli) -> Result<serde_json::Value, CliError> {
    match &cli.command {
        Command::Run(c) => commands::run(&config::resolve(&c.flags(), "out")?),
        Command::Convergence(c) => {
            commands::convergence(&config::resolve(&c.flags(), "out/convergence")?)
        }
        Command::Sweep(c) => commands::sweep(&config::resolve(&c.flags(), "out/sweep")?),
        Command::ValidateReaction { common, samples } => validate_reaction(common, *samples),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
