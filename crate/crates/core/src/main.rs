use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aimole::harness::{load_config, run_scenario, write_reference, ExperimentConfig, ScenarioSelection};
use aimole::Error;

#[derive(Parser)]
#[command(name = "aimole", version, about = "Autonomous iterative learning control of a simulated SCARA robot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning experiment.
    Run {
        /// s1, s2, s3 or all; defaults to the config's scenario.id.
        #[arg(long)]
        scenario: Option<String>,
        /// Trial budget, overrides learn.trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the reference trajectory CSV only.
    Reference {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(Error),
    Run(Error),
}

fn config_from(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => load_config(p).map_err(Failure::Usage),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            scenario,
            trials,
            seed,
            config,
            out,
        } => {
            let mut cfg = config_from(config.as_deref())?;
            if let Some(s) = scenario {
                cfg.scenario.selection = s.parse().map_err(Failure::Usage)?;
            }
            if let Some(j) = trials {
                cfg.learn.max_trials = j;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(Failure::Usage)?;
            let mut failed = false;
            for id in cfg.scenario.selection.ids() {
                let spec = cfg.build_reference(id).map_err(Failure::Usage)?;
                let report = run_scenario(&spec, &cfg, &out.join(id.short_name())).map_err(Failure::Run)?;
                let eps = report.epsilons();
                println!(
                    "{}: {} trials, final epsilon {}, {:.1} s",
                    id.name(),
                    eps.len(),
                    eps.last().map_or("n/a".to_string(), |e| format!("{e:.4}")),
                    report.wall_time
                );
                if let Some(f) = &report.failure {
                    eprintln!("{}: {f}", id.name());
                    failed = true;
                }
            }
            if failed {
                return Err(Failure::Run(Error::Precondition("learning did not complete".into())));
            }
            Ok(())
        }
        Command::Reference { scenario, config, out } => {
            let cfg = config_from(config.as_deref())?;
            let selection: ScenarioSelection = scenario.parse().map_err(Failure::Usage)?;
            for id in selection.ids() {
                let spec = cfg.build_reference(id).map_err(Failure::Usage)?;
                let path = write_reference(&spec, &out.join(id.short_name())).map_err(Failure::Run)?;
                println!("{}", path.display());
            }
            Ok(())
        }
    }
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
