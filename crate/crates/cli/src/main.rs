use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgdlab_cli::commands::{self, Overrides};

/// Run stochastic-gradient and stochastic-approximation experiments from
/// JSON configs.
///
/// Exit codes: 0 pass, 1 usage or config error, 2 fail, 3 hypotheses not met.
#[derive(Parser)]
#[command(name = "sgdlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// Replace the configured seeds with N derived streams.
    #[arg(long, global = true, value_name = "N")]
    seeds: Option<u64>,
    /// Output directory (default: the config's `out`, else ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: the config's `jobs`, else all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Skip SVG output.
    #[arg(long, global = true)]
    no_plot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run an experiment over a grid of one or two parameters.
    Sweep {
        config: PathBuf,
        /// s, k, p, alpha_scale, u or lambda. Repeat for a 2-D grid.
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        /// Comma-separated values for the matching --param; `a/b` allowed.
        #[arg(long = "values", required = true, allow_hyphen_values = true)]
        values: Vec<String>,
    },
    /// Estimate oracle bias and variance and check declared envelopes.
    VerifyOracles { config: PathBuf },
    /// Simulate a Robbins-Siegmund process and check its conclusions.
    Rs { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ov = Overrides {
        seeds: cli.flags.seeds,
        out: cli.flags.out,
        jobs: cli.flags.jobs,
        no_plot: cli.flags.no_plot,
    };
    let result = match &cli.command {
        Command::Run { config } => commands::run(config, &ov),
        Command::Sweep { config, params, values } => commands::sweep(config, params, values, &ov),
        Command::VerifyOracles { config } => commands::verify_oracles(config, &ov),
        Command::Rs { config } => commands::rs(config, &ov),
    };
    match result {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
