//! Command-line front end: run experiments from JSON configs, assemble
//! Pareto tables from summaries, and query the FLOPs / learning-rate rules.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynsparse::flops::{
    dense_train_flops, epsilon_critical, lr_sparse_from_dense, model_train_flops,
    write_pareto_csv, write_pareto_json,
};
use dynsparse::runner::{emit_pareto, run, write_outputs, ExperimentConfig, RunStatus, RunSummary};

#[derive(Parser)]
#[command(name = "dynsparse", about = "Dynamic block-sparse training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment from a JSON config and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join summary.json files (glob pattern) into a Pareto table.
    Pareto {
        #[arg(long)]
        inputs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale a dense learning rate to a sparsity ratio.
    LrRule {
        #[arg(long)]
        dense_lr: f64,
        #[arg(long)]
        sparsity: f64,
    },
    /// Report analytic training FLOPs per step for a config.
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> dynsparse::Result<()> {
    match command {
        Command::Run { config, seed, out } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let result = run(&cfg, seed)?;
            write_outputs(&result, &out)?;
            let loss = result
                .final_loss
                .map(|l| format!("{l:.6e}"))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "seed {seed}: status={} final_loss={loss} flops/step={:.3e} -> {}",
                match result.status {
                    RunStatus::Ok => "ok",
                    RunStatus::Diverged => "diverged",
                },
                result.flops_per_step,
                out.display()
            );
            Ok(())
        }
        Command::Pareto { inputs, out } => {
            let mut summaries = Vec::new();
            let mut paths: Vec<PathBuf> = glob::glob(&inputs)
                .map_err(|e| dynsparse::Error::InvalidArgument(format!("bad glob: {e}")))?
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| dynsparse::Error::InvalidArgument(format!("glob walk: {e}")))?;
            paths.sort();
            for path in &paths {
                let text = fs::read_to_string(path)?;
                let summary: RunSummary = serde_json::from_str(&text)?;
                summaries.push(summary);
            }
            let refs: Vec<&RunSummary> = summaries.iter().collect();
            let points = emit_pareto(&refs)?;
            let mut buf = Vec::new();
            if out.extension().is_some_and(|e| e == "json") {
                write_pareto_json(&points, &mut buf)?;
            } else {
                write_pareto_csv(&points, &mut buf)?;
            }
            fs::write(&out, buf)?;
            println!("{} runs -> {}", points.len(), out.display());
            Ok(())
        }
        Command::LrRule { dense_lr, sparsity } => {
            let lr = lr_sparse_from_dense(dense_lr, sparsity);
            println!("{lr}");
            Ok(())
        }
        Command::Flops { config } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let widths = &cfg.model.layer_widths;
            let densities: Vec<Option<f64>> = (0..widths.len() - 1)
                .map(|l| {
                    cfg.model
                        .sparse_layers
                        .contains(&l)
                        .then_some(1.0 - cfg.sparsity)
                })
                .collect();
            let sparse = model_train_flops(widths, &densities, cfg.batch_size)?;
            let dense: f64 = (0..widths.len() - 1)
                .map(|l| dense_train_flops(widths[l], widths[l + 1], cfg.batch_size))
                .sum();
            println!("train_flops_per_step: {sparse}");
            println!("dense_flops_per_step: {dense}");
            println!("epsilon_critical: {}", epsilon_critical(dense, sparse)?);
            Ok(())
        }
    }
}
