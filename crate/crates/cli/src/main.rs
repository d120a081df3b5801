use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use impedance_cli::{cmd_estimate, cmd_margins, cmd_run, CliError, Common};

#[derive(Parser)]
#[command(name = "impedance", version, about = "Probe-based impedance estimation and adaptive force control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a config value, e.g. `controller.adaptation=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Noise seed (scenario runs).
    #[arg(long)]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Bode data and stability margins over K̂/K_E ratios.
    Margins {
        /// Loop config file; the default loop when omitted.
        config: Option<PathBuf>,
        /// Comma-separated K̂/K_E ratios.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,10")]
        ratios: Vec<f64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Replay recorded probe samples (columns t, delta, force).
    Estimate {
        samples: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            out: a.out,
            overrides: a.set,
            seed: a.seed,
            quiet: a.quiet,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result: Result<(), CliError> = match cli.command {
        Command::Run { scenarios, common } => cmd_run(&scenarios, &common.into()),
        Command::Margins { config, ratios, common } => cmd_margins(config.as_deref(), &ratios, &common.into()),
        Command::Estimate { samples, common } => cmd_estimate(&samples, &common.into()).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
