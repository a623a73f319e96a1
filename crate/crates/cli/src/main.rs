use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use cohda_cli::{cmd_oracle, cmd_run, cmd_sweep, cmd_uncontrolled, cmd_validate, DEFAULT_CAP};

/// Distributed schedule optimization experiments on a simulated network.
#[derive(Parser)]
#[command(name = "cohda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write results, curve and plot series.
    Run {
        /// Builtin scenario name or scenario file.
        scenario: String,
        /// Derive every sub-seed from this run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the full event trace.
        #[arg(long)]
        trace: bool,
    },
    /// Run a factorial experiment design.
    Sweep {
        design: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Keep finished rows of an existing table and run only the rest.
        #[arg(long)]
        resume: bool,
    },
    /// Exhaustive optimum, worst case and greedy baseline.
    Oracle {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Result file of a previous run, for the optimality gap.
        #[arg(long)]
        result: Option<PathBuf>,
        /// Largest number of joint assignments to enumerate.
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: u64,
    },
    /// Aggregate without coordination.
    Uncontrolled {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a scenario; optionally write its canonical form.
    Validate {
        scenario: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            trace,
        } => {
            let r = cmd_run(&scenario, seed, &out, trace)?;
            let res = &r.result;
            println!(
                "fitness {} coverage {:.4} (uncontrolled {:.4}) messages {} terminated {} consistent {}",
                res.final_fitness,
                res.coverage_l1,
                r.uncontrolled_coverage,
                res.messages_sent,
                res.terminated,
                res.consistent
            );
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep {
            design,
            out,
            jobs,
            resume,
        } => {
            let r = cmd_sweep(&design, &out, jobs, resume)?;
            let failed = r.rows.iter().filter(|row| row.status != "ok").count();
            println!(
                "{} rows ({} executed, {} failed) in {}",
                r.rows.len(),
                r.executed,
                failed,
                out.display()
            );
        }
        Command::Oracle {
            scenario,
            seed,
            result,
            cap,
        } => println!("{}", cmd_oracle(&scenario, seed, result.as_deref(), cap)?),
        Command::Uncontrolled { scenario, seed, out } => {
            let r = cmd_uncontrolled(&scenario, seed, &out)?;
            println!("uncontrolled coverage {:.4} fitness {}", r.coverage_l1, r.fitness);
        }
        Command::Validate { scenario, out } => println!("{}", cmd_validate(&scenario, out.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
