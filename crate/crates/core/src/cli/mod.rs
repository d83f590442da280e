//! Scenario files, report writers and the batch tasks behind the `podex` binary.

pub mod dimension;
pub mod heart;
pub mod run;
pub mod scenario;

pub use dimension::{dimension_report, DimensionReport, DimensionRow};
pub use run::{output_dir, random_target_jets, run_scenario, Reports, RunError, SCHEMA};
pub use heart::{heart_fiber_scan, HeartScan};
pub use scenario::{BumpSpec, ConfigError, Scenario, Task};

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "podex", version, about = "Projected-orbit tangencies of Hamiltonian flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a scenario and write its reports.
    Run {
        scenario: PathBuf,
        /// Output directory (overrides PODEX_OUT_DIR and the scenario).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for parallel scans.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario without running it; prints the resolved form.
    Validate { scenario: PathBuf },
    /// Print the CSV column contract.
    Schema,
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Schema => {
            print!("{SCHEMA}");
            0
        }
        Command::Validate { scenario } => {
            match Scenario::load(&scenario).and_then(Scenario::resolve) {
                Ok(s) => {
                    print!("{}", toml::to_string(&s).expect("scenario serializes"));
                    0
                }
                Err(e) => {
                    eprintln!("podex: {e}");
                    2
                }
            }
        }
        Command::Run {
            scenario,
            out,
            threads,
            seed,
        } => {
            let mut s = match Scenario::load(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("podex: {e}");
                    return 2;
                }
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(t) = threads {
                if t == 0 {
                    eprintln!("podex: --threads must be positive");
                    return 2;
                }
                // Fails only if a pool already exists, which is harmless here.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
            }
            let dir = output_dir(&s, out.as_deref());
            let clock = Instant::now();
            let result = run_scenario(&s).and_then(|mut r| {
                let (name, bytes) = run::runtime_sidecar(
                    &s.name,
                    clock.elapsed().as_secs_f64(),
                    rayon::current_num_threads(),
                );
                r.files.push((name, bytes));
                r.write(&dir)?;
                Ok(r)
            });
            match result {
                Ok(r) => {
                    for (name, _) in &r.files {
                        println!("{}", dir.join(name).display());
                    }
                    0
                }
                Err(e) => {
                    eprintln!("podex: {e}");
                    e.exit_code()
                }
            }
        }
    }
}
