//! `rtg`: runs scenario files and the engine throughput benchmark.
//!
//! Successes print one JSON object per scenario on stdout. Failures print
//! `{"error": {...}}` on stderr and exit with status 1.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use rtg_core::harness::{self, HarnessError, RunOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rtg", version, about = "Action-chunk trajectory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Output root; reports go to `<out>/<scenario name>/`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the seeds listed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Scenarios run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write the blend QPs of the last accepted window.
        #[arg(long)]
        dump_qp: bool,
    },
    /// Parse and check scenario files without running them.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
    /// Time chunk ingestion on synthetic data.
    Bench {
        #[arg(long)]
        chunk_len: usize,
        #[arg(long)]
        channels: usize,
        #[arg(long, default_value_t = 1000)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn report_error(e: &HarnessError) {
    eprintln!("{}", e.record());
}

fn run(scenarios: &[PathBuf], opts: &RunOptions, jobs: usize) -> ExitCode {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<harness::RunSummary, HarnessError>>>> =
        Mutex::new((0..scenarios.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, scenarios.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = scenarios.get(i) else { break };
                let r = harness::run_scenario(path, opts);
                results.lock().expect("not poisoned")[i] = Some(r);
            });
        }
    });
    let mut ok = true;
    for r in results.into_inner().expect("not poisoned").into_iter().flatten() {
        match r {
            Ok(sum) => {
                let files: Vec<String> = sum.files.iter().map(|p| p.display().to_string()).collect();
                println!(
                    "{}",
                    json!({
                        "scenario": sum.scenario,
                        "kind": sum.kind.name(),
                        "out_dir": sum.out_dir.display().to_string(),
                        "files": files,
                    })
                );
            }
            Err(e) => {
                report_error(&e);
                ok = false;
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenarios,
            out,
            seed,
            jobs,
            dump_qp,
        } => {
            let opts = RunOptions {
                out_dir: out,
                seed,
                dump_qp,
            };
            run(&scenarios, &opts, jobs)
        }
        Command::Validate { scenarios } => {
            let mut ok = true;
            for p in &scenarios {
                match harness::validate_scenario(p) {
                    Ok(s) => println!(
                        "{}",
                        json!({
                            "scenario": s.name(),
                            "kind": s.kind().name(),
                            "config_sha256": s.config_sha256,
                            "seeds": s.seeds,
                        })
                    ),
                    Err(e) => {
                        report_error(&e);
                        ok = false;
                    }
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::Bench {
            chunk_len,
            channels,
            repetitions,
            seed,
        } => {
            if repetitions < 100 {
                let rec = json!({ "error": { "kind": "invalid", "message": format!("repetitions must be at least 100, got {repetitions}") } });
                eprintln!("{rec}");
                return ExitCode::FAILURE;
            }
            match harness::throughput_bench(chunk_len, channels, repetitions, seed) {
                Ok(stats) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&json!({ "machine": harness::machine_info(), "bench": stats }))
                            .expect("serializable")
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{}", json!({ "error": { "kind": "run", "message": e.to_string() } }));
                    ExitCode::FAILURE
                }
            }
        }
    }
}
