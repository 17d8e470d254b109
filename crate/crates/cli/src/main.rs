use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sam_cli::{commands, config_file, CliError};

#[derive(Parser)]
#[command(name = "sam", version, about = "Toy-scale sparse mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write per-step metrics as CSV
    Train {
        #[command(flatten)]
        common: Common,
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route one vector read from stdin and print the decision
    Route {
        #[command(flatten)]
        common: Common,
    },
    /// Count cross-device traffic of synthetic routing per policy and k
    SimulateComm {
        #[command(flatten)]
        common: Common,
        /// Comma-separated k values; defaults to the config's k
        #[arg(long)]
        k_list: Option<String>,
        #[arg(long, default_value_t = 10_000)]
        n_tokens: usize,
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-token flops, parameter counts and sparsity ratio
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    let load = |c: &Common| config_file::load(&c.config, c.seed);
    match cli.command {
        Command::Train { common, out: path } => {
            let cfg = load(&common)?;
            commands::train(&cfg, path.as_deref(), &mut out, &mut err)?;
        }
        Command::Route { common } => {
            let cfg = load(&common)?;
            let mut input = String::new();
            io::stdin().read_to_string(&mut input)?;
            commands::route(&cfg, &input, &mut out)?;
        }
        Command::SimulateComm {
            common,
            k_list,
            n_tokens,
            out: path,
        } => {
            let cfg = load(&common)?;
            let ks = match k_list {
                Some(s) => commands::parse_k_list(&s)?,
                None => vec![cfg.k],
            };
            let rows = commands::simulate_comm(&cfg, n_tokens, &ks)?;
            match path {
                Some(p) => {
                    let mut f = std::fs::File::create(&p)
                        .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                    commands::write_comm_csv(&rows, &mut f)?;
                    writeln!(out, "wrote {} rows to {} (seed {})", rows.len(), p.display(), cfg.seed)?;
                }
                None => {
                    commands::write_comm_csv(&rows, &mut out)?;
                    writeln!(err, "seed {}", cfg.seed)?;
                }
            }
        }
        Command::Flops { common } => commands::flops(&load(&common)?, &mut out)?,
        Command::Gradcheck { common } => {
            commands::gradcheck(&load(&common)?, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
