use clap::{Parser, Subcommand};
use quench_cli::commands::{self, SweepGrid};
use quench_cli::config::ConfigArgs;
use quench_cli::{exit, CliError};

/// Quenching laboratory for u_t = u_xx - u^p with p < 0.
#[derive(Parser)]
#[command(name = "quench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Physical-space run to the quench floor.
    SimulateDirect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write every k-th recorded field as snapshot_<k>.csv (0 disables).
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
    },
    /// Blow-up frame run with majorants, monitors and asymptotic fits.
    SimulateRescaled {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Invariant suite: spectral, splitting, heat or model.
    Verify {
        suite: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rescaled runs over a grid of p, b0 and delta0 values.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated p values; an empty list gives an empty sweep.
        #[arg(long, allow_hyphen_values = true)]
        p_values: Option<String>,
        #[arg(long)]
        b0_values: Option<String>,
        #[arg(long)]
        delta0_values: Option<String>,
    },
}

fn list(key: &str, text: &Option<String>) -> Result<Option<Vec<f64>>, CliError> {
    text.as_deref().map(|t| SweepGrid::parse_list(key, t)).transpose()
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::SimulateDirect { config, snapshot_every } => {
            commands::simulate_direct(&config.resolve()?, snapshot_every)
        }
        Command::SimulateRescaled { config } => commands::simulate_rescaled(&config.resolve()?),
        Command::Verify { suite, config } => commands::verify(&config.resolve()?, &suite),
        Command::Sweep { config, p_values, b0_values, delta0_values } => {
            let cfg = config.resolve()?;
            let grid = SweepGrid {
                p: list("p", &p_values)?,
                b0: list("b0", &b0_values)?,
                delta0: list("delta0", &delta0_values)?,
            };
            let summary = commands::sweep(&cfg, &grid)?;
            println!("{} of {} cells succeeded", summary.succeeded, summary.cells.len());
            Ok(summary.exit_code)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { exit::CONFIG_ERROR } else { exit::OK };
            std::process::exit(code);
        }
    };
    let code = run(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    });
    std::process::exit(code);
}
