use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgelam_core::casestudy::{write_budget_csv, TokenBudgetModel};
use edgelam_core::scenario::{self, exit_code, Scenario, EXIT_CONFIG, EXIT_INFEASIBLE};
use edgelam_core::Error;

#[derive(Parser)]
#[command(name = "edgelam-sim", version, about = "Edge large-model deployment simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write CSV/JSON outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Token-budget sweep of the case-study cost model.
    Casestudy {
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256])]
        budgets: Vec<usize>,
        /// Calibrate the model to the reference reductions first.
        #[arg(long)]
        calibrate: bool,
        /// JSON file with a fixed model (ignored with --calibrate).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write budgets.csv and summary.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("edgelam-sim: {err}");
    ExitCode::from(exit_code(err) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG as u8) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run { config, out, seed } => match scenario::run_scenario(&config, &out, seed) {
            Ok(report) => {
                for f in &report.files {
                    println!("{}", out.join(f).display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Validate { config } => match Scenario::load(&config).and_then(|s| s.validate().map(|_| s)) {
            Ok(s) => {
                println!("ok: {} scenario, seed {}", s.kind(), s.seed());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Casestudy { budgets, calibrate, model, out } => casestudy(budgets, calibrate, model, out),
    }
}

fn casestudy(budgets: Vec<usize>, calibrate: bool, model: Option<PathBuf>, out: Option<PathBuf>) -> ExitCode {
    let fixed = match (calibrate, model) {
        (true, _) => None,
        (false, Some(path)) => {
            let parsed = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
                .and_then(|t| {
                    serde_json::from_str::<TokenBudgetModel>(&t)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
                });
            match parsed {
                Ok(m) => Some(m),
                Err(e) => return fail(&e),
            }
        }
        (false, None) => return fail(&Error::Config("pass --calibrate or --model <file>".into())),
    };
    let run = match scenario::casestudy_run(&budgets, fixed, None) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = write_budget_csv(&mut stdout, &run.rows) {
        return fail(&e.into());
    }
    let mut status = ExitCode::SUCCESS;
    if let Some(cal) = &run.calibration {
        eprintln!(
            "calibrated N={} base_mem={} gamma_handoff={} residual=({:.4}, {:.4}) within_tolerance={}",
            cal.model.n_total, cal.model.base_mem, cal.model.gamma_handoff, cal.residual.0, cal.residual.1,
            cal.within_tolerance
        );
        if !cal.within_tolerance {
            status = ExitCode::from(EXIT_INFEASIBLE as u8);
        }
    }
    if let Some(dir) = out {
        let scenario = Scenario::Casestudy(scenario::CasestudyScenario {
            seed: 0,
            budgets,
            model: if calibrate { None } else { Some(run.model.clone()) },
            targets: None,
        });
        if let Err(e) = scenario::run(&scenario, &dir) {
            return fail(&e);
        }
    }
    status
}
