use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use capforge::commands;
use clap::{Parser, Subcommand};

/// Desk-scale CNN-GRU image captioning with reconstruction rescoring.
///
/// Worker threads for batch captioning are capped by CAPFORGE_THREADS
/// (default: machine parallelism). All randomness flows from --seed /
/// config seeds; reruns produce byte-identical primary outputs apart
/// from timing fields.
#[derive(Parser)]
#[command(name = "capforge", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene-caption dataset (JSONL).
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of samples (must be ≥ 1).
        #[arg(long)]
        n: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value = "dataset.jsonl")]
        out: PathBuf,
    },
    /// Train from a JSON run config; writes checkpoint and train log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Caption a dataset with a trained checkpoint (JSONL out).
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "captions.jsonl")]
        out: PathBuf,
        /// Beam width K.
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Reconstruction weight applied when ranking candidates.
        #[arg(long, default_value_t = 1.0)]
        lambda_test: f64,
        /// Maximum generated tokens per caption (EOS included).
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
    /// Score a captions file against dataset references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Caption + eval over a beam-width × lambda grid; emits CSV and JSON.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated beam widths.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5")]
        beams: Vec<usize>,
        /// Comma-separated rescoring weights.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[arg(long, default_value = "sweep.csv")]
        out_csv: PathBuf,
        #[arg(long, default_value = "sweep.json")]
        out_json: PathBuf,
    },
    /// Time one GRU step against one LSTM step at equal dims.
    BenchCells {
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every model gradient against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt one tensor's analytic gradient to prove the checker
        /// catches it (negative control); forces a failing exit.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { seed, n, grid, out } => {
            let summary = commands::cmd_gen_data(seed, n, grid, &out)?;
            print_json(&summary)?;
            Ok(true)
        }
        Cmd::Train { config } => {
            let summary = commands::cmd_train(&config)?;
            print_json(&summary)?;
            Ok(true)
        }
        Cmd::Caption {
            checkpoint,
            dataset,
            out,
            beam,
            lambda_test,
            max_len,
        } => {
            let n =
                commands::cmd_caption(&checkpoint, &dataset, &out, beam, lambda_test, max_len)?;
            eprintln!("wrote {n} captions to {}", out.display());
            Ok(true)
        }
        Cmd::Eval {
            candidates,
            dataset,
            out,
        } => {
            let report = commands::cmd_eval(&candidates, &dataset, &out)?;
            print_json(&report)?;
            Ok(true)
        }
        Cmd::Sweep {
            checkpoint,
            dataset,
            beams,
            lambdas,
            max_len,
            out_csv,
            out_json,
        } => {
            let rows = commands::cmd_sweep(
                &checkpoint,
                &dataset,
                &beams,
                &lambdas,
                max_len,
                &out_csv,
                &out_json,
            )?;
            print_json(&rows)?;
            Ok(true)
        }
        Cmd::BenchCells {
            dim,
            iters,
            seed,
            out,
        } => {
            let report = commands::cmd_bench_cells(dim, iters, seed, out.as_deref())?;
            print_json(&report)?;
            Ok(true)
        }
        Cmd::GradCheck { seed, corrupt } => {
            let outcomes = commands::cmd_grad_check(seed, corrupt.as_deref())?;
            print_json(&outcomes)?;
            let ok = outcomes.iter().all(|o| o.all_pass);
            if !ok {
                for o in &outcomes {
                    for t in o.tensors.iter().filter(|t| !t.pass) {
                        eprintln!(
                            "FAIL {} ({}): max rel err {:.3e}",
                            t.name, o.pooling, t.max_rel_err
                        );
                    }
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
