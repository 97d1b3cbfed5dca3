use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kinetic::harness::{self, HarnessError, Report};

#[derive(Parser)]
#[command(name = "kinetic", version, about = "Kinetic experiments: semigroups, splitting constants and Boltzmann solves")]
struct Cli {
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment and writes report.json plus one CSV per series.
    Run { config: PathBuf },
    /// Parses and validates a configuration without running it.
    Validate { config: PathBuf },
    /// Runs the experiment once per value of a dotted configuration key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn summarize(report: &Report, dir: &std::path::Path) {
    for c in &report.checks {
        println!("{c}");
    }
    for n in &report.notices {
        println!("note: {n}");
    }
    println!("wrote {}", dir.display());
}

fn fail(e: HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(2);
        }
    }
    match cli.command {
        Command::Validate { config } => match harness::load_config(&config) {
            Ok(cfg) => {
                println!("{}: valid {:?} experiment", config.display(), cfg.experiment);
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Run { config } => match harness::run_experiment(&config) {
            Ok((report, dir)) => {
                summarize(&report, &dir);
                match report.failures().next() {
                    None => ExitCode::SUCCESS,
                    Some(c) => {
                        eprintln!("check failed: {c}");
                        ExitCode::from(1)
                    }
                }
            }
            Err(e) => fail(e),
        },
        Command::Sweep { config, param, values } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    return fail(HarnessError::config("<document>", format!("cannot read {}: {e}", config.display())))
                }
            };
            let runs = match harness::sweep_configs(&text, &param, &values) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let mut failed = false;
            for (value, cfg) in runs {
                println!("== {param} = {value}");
                let dir = harness::output_dir(&cfg);
                match harness::run(&cfg).and_then(|r| r.write(&dir).map(|_| r)) {
                    Ok(report) => {
                        summarize(&report, &dir);
                        failed |= !report.passed();
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        failed = true;
                    }
                }
            }
            if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
