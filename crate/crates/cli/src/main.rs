use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sood_core::harness::{self, ExperimentConfig, SweepGrid};
use sood_core::selftest::{self, SelftestOptions};
use sood_core::Error;

#[derive(Parser)]
#[command(name = "sood", version, about = "Semi-supervised oriented detection lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and evaluate its teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Run a grid of variants over shared seeds and write summary tables.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        /// Reuse finished runs whose config hash matches.
        #[arg(long)]
        reuse: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Re-evaluate a finished run from its record and checkpoint.
    Eval {
        #[arg(long)]
        record: PathBuf,
    },
    /// Run the oracle suites.
    Selftest {
        /// Regularization for the transport agreement check.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Bias added to analytic gradients (mutation check).
        #[arg(long)]
        grad_bias: Option<f64>,
        #[arg(long)]
        json: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedSize { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            run_id,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            if let Some(id) = run_id {
                cfg.run_id = id;
            }
            cfg.validate()?;
            let rec = harness::run(&cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": cfg.run_dir(),
                    "config_hash": rec.config_hash,
                    "seed": rec.seed,
                    "map": rec.final_eval.map,
                    "wall_clock_s": rec.wall_clock_s,
                })
            );
            Ok(0)
        }
        Command::Sweep {
            config,
            grid,
            out,
            reuse,
            jobs,
        } => {
            let base = ExperimentConfig::load(&config)?;
            let mut g = SweepGrid::load(&grid)?;
            if let Some(j) = jobs {
                g.jobs = j;
            }
            let results = harness::sweep(&base, &g, &out, reuse)?;
            for (i, a) in g.axes.iter().enumerate() {
                println!("{}", a.name);
                for row in harness::axis_summary(&g, &results, i) {
                    println!(
                        "  {:<24} n={:<3} mAP {:.4} ± {:.4}",
                        row.level, row.runs, row.mean_map, row.std_map
                    );
                }
            }
            println!("tables written to {}", out.display());
            Ok(0)
        }
        Command::Eval { record } => {
            let (rec, report) = harness::reevaluate(&record)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report != rec.final_eval {
                eprintln!("re-evaluation differs from the recorded result");
                return Ok(1);
            }
            Ok(0)
        }
        Command::Selftest {
            epsilon,
            grad_bias,
            json,
        } => {
            let mut opts = SelftestOptions::default();
            if let Some(e) = epsilon {
                opts.epsilon = e;
            }
            if let Some(b) = grad_bias {
                opts.grad_bias = b;
            }
            let results = selftest::run_all(&opts);
            if json {
                println!("{}", serde_json::to_string_pretty(&results).expect("results serialize"));
            } else {
                for r in &results {
                    println!(
                        "{:<6} {:<22} measured {:>10.3e}  tol {:>8.1e}  {}",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.name,
                        r.measured,
                        r.tolerance,
                        r.detail
                    );
                }
            }
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
        }
    }
}
