use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use modmix::config::{effective_out_dir, parse_file};
use modmix::error::{Error, Result};
use modmix::runner::{
    format_check_reports, run_eval, run_gradcheck, run_sweep, run_synth, run_train, Scenario,
};

#[derive(Parser)]
#[command(
    name = "modmix",
    version,
    about = "Train and evaluate attention-based classifiers over mixed image, ordinal, and categorical inputs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; writes a checkpoint and loss report
    Train {
        config: PathBuf,
    },
    /// Score a CSV dataset with a trained checkpoint
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Comma-separated modalities to hide during scoring
        #[arg(long)]
        missing: Option<String>,
        /// Also write the report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per drop probability and score each missing-data scenario
    Sweep {
        config: PathBuf,
        /// Comma-separated drop probabilities, e.g. 0,0.5,0.9
        #[arg(long)]
        p: String,
        /// Scenario: `full` or comma-separated modalities to hide (repeatable)
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        /// Also write the report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences
    Gradcheck {
        /// Embedding width of the end-to-end test model
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Attention heads of the end-to-end test model
        #[arg(long, default_value_t = 2)]
        h: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic CSV dataset from a preset config
    Synth {
        config: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn write_out(path: &Option<PathBuf>, report: &str) -> Result<()> {
    if let Some(path) = path {
        std::fs::write(path, report).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Train { config } => {
            let cfg = parse_file(&config)?;
            let out_dir = effective_out_dir(&cfg);
            let outcome = run_train(&cfg, &out_dir)?;
            if let Some(last) = outcome.reports.last() {
                println!("trained {} epochs, final loss {:.6}", outcome.reports.len(), last.total);
            } else {
                println!("trained 0 epochs");
            }
            if let Some(auc) = outcome.best_val_auc {
                println!("best val auc {auc:.4}");
            }
            println!("checkpoint {}", outcome.checkpoint_path.display());
            println!("report {}", outcome.report_path.display());
            Ok(0)
        }
        Cmd::Eval { checkpoint, dataset, missing, out } => {
            let scenario = match missing.as_deref() {
                None | Some("") => Scenario::full(),
                Some(token) => Scenario::parse(token)?,
            };
            let report = run_eval(&checkpoint, &dataset, &scenario)?;
            print!("{report}");
            write_out(&out, &report)?;
            Ok(0)
        }
        Cmd::Sweep { config, p, scenarios, out } => {
            let cfg = parse_file(&config)?;
            let ps = p
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<f64>().map_err(|_| {
                        Error::config(format!("--p entry '{item}' is not a number"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let scenarios = if scenarios.is_empty() {
                vec![Scenario::full()]
            } else {
                scenarios
                    .iter()
                    .map(|s| Scenario::parse(s))
                    .collect::<Result<Vec<Scenario>>>()?
            };
            let report = run_sweep(&cfg, &ps, &scenarios)?;
            print!("{report}");
            write_out(&out, &report)?;
            Ok(0)
        }
        Cmd::Gradcheck { d, h, seed } => {
            let reports = run_gradcheck(d, h, seed)?;
            print!("{}", format_check_reports(&reports));
            if reports.iter().all(|r| r.passed()) {
                println!("all {} checks passed", reports.len());
                Ok(0)
            } else {
                let failed = reports.iter().filter(|r| !r.passed()).count();
                println!("{failed} of {} checks failed", reports.len());
                Ok(3)
            }
        }
        Cmd::Synth { config } => {
            let cfg = parse_file(&config)?;
            let out_dir = effective_out_dir(&cfg);
            let csv = run_synth(&cfg, &out_dir)?;
            println!("dataset {}", csv.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
            _ => 1,
        };
        let _ = e.print();
        std::process::exit(code);
    });
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
