use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use voltsim::io;
use voltsim::par::ExecPolicy;
use voltsim::scenarios;
use voltsim::sim::{self, RunOptions, Settling, SummaryOptions};
use voltsim::verification::{self, HarnessMode, PairedOptions};

#[derive(Parser)]
#[command(name = "voltsim", version, about = "Radial feeder simulator with adaptive inverter mitigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trace.csv, energy_stats.csv and summary.json.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the step size, s.
        #[arg(long)]
        dt: Option<f64>,
        /// Override the horizon, s.
        #[arg(long)]
        horizon: Option<f64>,
        /// Override the load-noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep every adaptive controller's output at zero.
        #[arg(long)]
        disable_adaptive: bool,
        /// Run on the calling thread only.
        #[arg(long)]
        sequential: bool,
    },
    /// Print the stability criterion and certificate verdicts before and after the events.
    Check { scenario: PathBuf },
    /// Run the plant/reference harness and print a pass/fail report.
    Verify {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Write the bundled scenarios as TOML files.
    Bundled {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Injection,
    Bias,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run { scenario, out, dt, horizon, seed, disable_adaptive, sequential } => {
            let mut config = io::parse_scenario(&scenario).map_err(|e| e.to_string())?;
            if let Some(dt) = dt {
                config.simulation.dt = dt;
            }
            if let Some(h) = horizon {
                config.simulation.horizon = h;
            }
            if let Some(s) = seed {
                config.simulation.seed = s;
            }
            let policy = if sequential { ExecPolicy::Sequential } else { ExecPolicy::Parallel };
            let trace = sim::run_scenario(&config, RunOptions { policy, disable_adaptive })
                .map_err(|errs| errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))?;
            let files = io::write_trace(&trace, &out, SummaryOptions::default()).map_err(|e| e.to_string())?;
            let summary = sim::compute_summary(&trace, SummaryOptions::default());
            println!("scenario: {} ({} rows)", summary.scenario, summary.rows);
            if let Some(d) = &summary.divergence {
                println!("diverged at t = {} on node {} (v = {})", d.time, d.node, d.value);
            }
            let unsettled = summary.nodes.iter().filter(|n| n.settling_time == Settling::NotSettled).count();
            let worst = summary
                .nodes
                .iter()
                .filter_map(|n| match n.settling_time {
                    Settling::At(t) => Some(t),
                    Settling::NotSettled => None,
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if unsettled > 0 {
                println!("settling: {unsettled} of {} nodes not settled", summary.nodes.len());
            } else if worst.is_finite() {
                println!("settling: all nodes by t = {worst}");
            }
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { scenario } => {
            let config = io::parse_scenario(&scenario).map_err(|e| e.to_string())?;
            let report = verification::check_scenario(&config).map_err(|e| e.to_string())?;
            println!("{report}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { scenario, mode } => {
            let config = io::parse_scenario(&scenario).map_err(|e| e.to_string())?;
            let mode = match mode {
                Mode::Injection => HarnessMode::Injection,
                Mode::Bias => HarnessMode::Bias,
            };
            let report = verification::verify(&config, mode, &PairedOptions::default()).map_err(|e| e.to_string())?;
            println!("{report}");
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Bundled { out } => {
            std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            for (name, config) in scenarios::bundled() {
                let path = out.join(format!("{name}.toml"));
                io::write_scenario(&config, &path).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
