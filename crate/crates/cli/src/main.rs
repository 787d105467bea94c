mod output;
mod run;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use crate::scenario::{ScenarioError, BUNDLED};

#[derive(Parser)]
#[command(name = "longrun-wishart", version, about = "Long-run portfolio experiments on Wishart factor models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stamp {
    None,
    Unix,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scenario's tasks and write report.json, CSV tables and plots.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "LONGRUN_THREADS")]
        threads: Option<usize>,
        /// Replaces sim.masterSeed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "unix")]
        stamp: Stamp,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Parse and check a scenario without computing anything.
    Validate {
        scenario: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List the bundled scenarios.
    Scenarios,
}

fn scenario_exit(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Model(err) => run::exit_code(err) as u8,
        _ => run::EXIT_INPUT as u8,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Scenarios => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Cmd::Validate { scenario, overrides } => {
            match scenario::load(&scenario, &overrides).and_then(|sc| sc.build().map(|_| sc)) {
                Ok(sc) => {
                    println!(
                        "ok: {} (d = {}, n = {}, tasks: {:?})",
                        sc.name.as_deref().unwrap_or("unnamed"),
                        sc.model.d,
                        sc.model.n,
                        sc.tasks
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(scenario_exit(&e))
                }
            }
        }
        Cmd::Run {
            scenario,
            out,
            threads,
            seed,
            stamp,
            mut overrides,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("sim.masterSeed={s}"));
            }
            if let Some(n) = threads.filter(|n| *n > 0) {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: thread pool: {e}");
                }
            }
            let loaded = scenario::load(&scenario, &overrides).and_then(|sc| sc.build().map(|b| (sc, b)));
            let (sc, built) = match loaded {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(scenario_exit(&e));
                }
            };
            let ts = match stamp {
                Stamp::None => None,
                Stamp::Unix => SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs()),
            };
            match run::run(&sc, &built, &out, ts) {
                Ok(o) => {
                    if let Some(m) = o.message {
                        eprintln!("error: {m}");
                    }
                    println!("report: {}", out.join("report.json").display());
                    ExitCode::from(o.exit as u8)
                }
                Err(e) => {
                    eprintln!("error: cannot write to {}: {e}", out.display());
                    ExitCode::from(run::EXIT_INPUT as u8)
                }
            }
        }
    }
}
