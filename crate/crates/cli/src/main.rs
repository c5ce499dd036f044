use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opc::scenario::TASK_NAMES;
use opc::{cmd_gen, cmd_report, cmd_run, cmd_verify, load_artifact, load_scenario, CliError, EXIT_OK};

#[derive(Parser)]
#[command(name = "opc", version, about = "Certified compressions, dilations and diagonals of operator paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write instance.json, region.json and budget.json for a scenario.
    Gen {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the scenario task and write artifact.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(TASK_NAMES))]
        task: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Re-check an artifact on a finer grid.
    Verify {
        /// Defaults to <out>/artifact.json.
        artifact: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        fine_factor: usize,
    },
    /// Write report.csv (and report.svg with --svg) for an artifact.
    Report {
        artifact: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Gen { scenario, out } => {
            let s = load_scenario(&scenario)?;
            for p in cmd_gen(&s, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(EXIT_OK)
        }
        Command::Run { scenario, task, out } => {
            let s = load_scenario(&scenario)?;
            let outcome = cmd_run(&s, task.as_deref(), &out)?;
            let art = &outcome.artifact;
            println!("{} {:?}: wrote {}", art.task, art.status, outcome.path.display());
            if let Some(m) = &art.message {
                eprintln!("{m}");
            }
            Ok(outcome.exit_code)
        }
        Command::Verify { artifact, out, fine_factor } => {
            let path = artifact.unwrap_or_else(|| out.join("artifact.json"));
            let art = load_artifact(&path)?;
            match cmd_verify(&art, fine_factor)? {
                None => println!("nothing to verify ({:?} run)", art.status),
                Some(r) => {
                    for c in &r.checks {
                        println!("{:<20} {:.3e} <= {:.3e}", c.name, c.measured, c.limit);
                    }
                    println!("verified {} points", r.points);
                }
            }
            Ok(EXIT_OK)
        }
        Command::Report { artifact, out, svg } => {
            let path = artifact.unwrap_or_else(|| out.join("artifact.json"));
            let art = load_artifact(&path)?;
            for p in cmd_report(&art, &out, svg)? {
                println!("wrote {}", p.display());
            }
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
