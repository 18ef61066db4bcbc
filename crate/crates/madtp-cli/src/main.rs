//! Command-line harness: simulation, temperature calibration, the static
//! pruning baseline, attention-dump replay, toy alignment training, and
//! report re-export.
//!
//! Exit codes: 0 success, 2 validation error, 3 non-convergence.

use clap::{Parser, Subcommand, ValueEnum};
use madtp::dtp::TisComponents;
use madtp::harness::{self, dump, report, RunConfig};
use madtp::MadtpError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "madtp",
    version,
    about = "Alignment-guided dynamic token pruning engine",
    long_about = "Simulate, calibrate and inspect dynamic token pruning on a toy \
                  dual-branch vision-language transformer."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Forward the synthetic dataset and write the full report set.
    Simulate {
        /// Run configuration (JSON). Omit to use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "madtp-out")]
        out: PathBuf,
    },
    /// Iterate simulate + temperature adjustment toward a target reduce ratio.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of baseline compute to eliminate, in [0, 1).
        #[arg(long)]
        target_ratio: Option<f64>,
        #[arg(long, default_value = "madtp-out")]
        out: PathBuf,
    },
    /// Static baseline: drop exactly k lowest-score tokens per layer.
    Stp {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Tokens dropped per layer per branch.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "madtp-out")]
        out: PathBuf,
    },
    /// Validate a binary attention dump and replay the threshold rule on it.
    Ingest {
        #[arg(long)]
        dump: PathBuf,
        /// Sparsemax temperature used for the replay.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Optional file for the replay summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the alignment module and match head on planted synthetic pairs.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "madtp-out")]
        out: PathBuf,
    },
    /// Re-emit a stored report as text or JSON.
    Report {
        /// Directory containing report.txt.
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, MadtpError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), MadtpError> {
    match cli.command {
        Command::Simulate { config, out } => {
            let config = load_config(&config)?;
            let outcome = harness::run_simulate(&config)?;
            harness::export_run(&outcome.report, &out, config.render_limit)?;
            if !outcome.dataset.is_empty() {
                harness::export_first_pair_dump(
                    &config,
                    &outcome.weights,
                    &outcome.mag,
                    &outcome.dataset,
                    &out.join("pair0000.dump"),
                )?;
            }
            println!(
                "simulate: {} pairs, baseline {:.4} GFLOPs, measured {:.4} GFLOPs, reduce ratio {:.4}",
                outcome.report.pairs.len(),
                outcome.report.baseline_gflops,
                outcome.report.dataset_average_gflops,
                outcome.report.achieved_reduce_ratio
            );
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Calibrate { config, target_ratio, out } => {
            let config = load_config(&config)?;
            let target = target_ratio.unwrap_or(config.model.target_reduce_ratio);
            let outcome = harness::run_calibrate(&config, target)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| MadtpError::io(out.display().to_string(), e))?;
            let trace_path = out.join("calibration.txt");
            std::fs::write(&trace_path, outcome.trace_text())
                .map_err(|e| MadtpError::io(trace_path.display().to_string(), e))?;
            print!("{}", outcome.trace_text());
            if !outcome.converged {
                return Err(MadtpError::NonConvergence(format!(
                    "calibration missed the {:.0}% band after {} iterations (trace at {})",
                    config.calibrate.tolerance * 100.0,
                    outcome.iterations + 1,
                    trace_path.display()
                )));
            }
            Ok(())
        }
        Command::Stp { config, k, out } => {
            let config = load_config(&config)?;
            let k = k.unwrap_or(config.stp_k);
            let outcome = harness::run_stp_baseline(&config, k)?;
            harness::export_run(&outcome.report, &out, config.render_limit)?;
            println!(
                "stp k={k}: measured {:.4} GFLOPs (baseline {:.4})",
                outcome.report.dataset_average_gflops, outcome.report.baseline_gflops
            );
            Ok(())
        }
        Command::Ingest { dump: dump_path, temperature, out } => {
            let (maps, warnings) = dump::ingest_attention_dump(&dump_path)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let replay = dump::replay_dump(&maps, temperature, TisComponents::default())?;
            let mut summary = format!(
                "ingested {} entries from {}\n",
                maps.entries.len(),
                dump_path.display()
            );
            for layer in &replay {
                summary.push_str(&format!(
                    "{:?} layer {}: theta={:.9} kept {}/{}\n",
                    layer.modality, layer.layer, layer.theta, layer.kept, layer.total
                ));
            }
            print!("{summary}");
            if let Some(out) = out {
                std::fs::write(&out, summary)
                    .map_err(|e| MadtpError::io(out.display().to_string(), e))?;
            }
            Ok(())
        }
        Command::TrainToy { config, out } => {
            let config = load_config(&config)?;
            let outcome = harness::run_train_toy(&config)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| MadtpError::io(out.display().to_string(), e))?;
            let mut curve = String::from("step\tl_task\tl_sim\ttotal\n");
            for (i, step) in outcome.result.steps.iter().enumerate() {
                curve.push_str(&format!(
                    "{i}\t{:.9}\t{:.9}\t{:.9}\n",
                    step.l_task, step.l_sim, step.total
                ));
            }
            let curve_path = out.join("losses.tsv");
            std::fs::write(&curve_path, curve)
                .map_err(|e| MadtpError::io(curve_path.display().to_string(), e))?;
            let initial = outcome.result.initial;
            let final_loss = outcome.result.final_loss;
            println!(
                "train-toy: l_sim {:.6} -> {:.6}, l_task {:.6} -> {:.6} over {} steps",
                initial.l_sim,
                final_loss.l_sim,
                initial.l_task,
                final_loss.l_task,
                outcome.result.steps.len()
            );
            println!("loss curve written to {}", curve_path.display());
            Ok(())
        }
        Command::Report { input, format } => {
            let path = if input.is_dir() { input.join("report.txt") } else { input };
            let parsed = report::read_text(&path)?;
            match format {
                ReportFormat::Text => print!("{}", report::to_text(&parsed)),
                ReportFormat::Json => println!("{}", report::to_json(&parsed)),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(MadtpError::NonConvergence(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
