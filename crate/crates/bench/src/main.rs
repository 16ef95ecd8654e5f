use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdc_mpc_bench::report::{collect_runs, comparison_table, write_run};
use sdc_mpc_bench::{run_scenario, BenchError, ControllerKind, DisturbanceMode, ScenarioConfig};

#[derive(Parser)]
#[command(name = "bench", about = "Closed-loop quadrotor MPC benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Nmpc,
    Sdc,
    RobustSdc,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario and write telemetry and metrics per controller.
    Run {
        /// TOML scenario file; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Controllers to run; the config's list when omitted.
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Run controllers one after another instead of in parallel threads.
        #[arg(long)]
        sequential: bool,
        #[arg(long, value_enum)]
        disturbance: Option<DisturbanceMode>,
    },
    /// Print a comparison table of the runs under `out`.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run {
            config,
            controller,
            seed,
            out,
            sequential,
            disturbance,
        } => {
            let mut cfg = match &config {
                Some(path) => ScenarioConfig::load(path)?,
                None => ScenarioConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(mode) = disturbance {
                cfg.disturbance_mode = mode;
            }
            let controllers = match controller {
                None => cfg.controllers.clone(),
                Some(ControllerArg::All) => ControllerKind::ALL.to_vec(),
                Some(ControllerArg::Nmpc) => vec![ControllerKind::Nmpc],
                Some(ControllerArg::Sdc) => vec![ControllerKind::Sdc],
                Some(ControllerArg::RobustSdc) => vec![ControllerKind::RobustSdc],
            };
            cfg.controllers = controllers.clone();
            let run = run_scenario(&cfg, &controllers, sequential)?;
            std::fs::create_dir_all(&out).map_err(|e| BenchError::io(&out, e))?;
            for outcome in &run.outcomes {
                let metrics = write_run(&out, &cfg, outcome, &run.disturbance_digest)?;
                println!("[{}]", outcome.controller.name());
                print!("{}", metrics.to_key_values());
                if let Some(fault) = &outcome.fault {
                    eprintln!("{}: run aborted: {fault}", outcome.controller.name());
                }
            }
            Ok(())
        }
        Command::Compare { out } => {
            let table = comparison_table(&collect_runs(&out)?);
            let path = out.join("comparison.txt");
            std::fs::write(&path, &table).map_err(|e| BenchError::io(&path, e))?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
