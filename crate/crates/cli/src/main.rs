use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use odfl::harness::{
    ablation_command, compare_command, export_plots, pretrain_command, run_experiment, ExperimentConfig,
};

/// On-demand federated learning simulator.
#[derive(Parser)]
#[command(name = "odfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured selector over every seed; writes metrics, the
    /// transition log and (for dqn) one model per seed.
    Simulate { config: PathBuf },
    /// Pre-train a model offline from a transition log.
    Pretrain {
        log: PathBuf,
        out: PathBuf,
        /// Experiment config supplying the agent settings and horizon; the
        /// log and output paths are then taken relative to its output_dir.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run all four selectors on shared seeds and print a summary table.
    Compare { config: PathBuf },
    /// Run the DQN under the three objective-weight scenarios.
    Ablate { config: PathBuf },
    /// Rewrite a metrics CSV in long format for plotting.
    ExportPlots { metrics: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn under(dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg = load(&config)?;
            let res = run_experiment(&cfg)?;
            println!("metrics: {}", res.metrics_path.display());
            println!("log: {}", res.log_path.display());
            for p in &res.model_paths {
                println!("model: {}", p.display());
            }
        }
        Command::Pretrain {
            log,
            out,
            config,
            epochs,
            seed,
        } => {
            let cfg = match &config {
                Some(path) => load(path)?,
                None => ExperimentConfig::default(),
            };
            let (log, out) = if config.is_some() {
                std::fs::create_dir_all(&cfg.output_dir)?;
                (under(&cfg.output_dir, &log), under(&cfg.output_dir, &out))
            } else {
                (log, out)
            };
            let (_, losses) = pretrain_command(&log, &cfg.agent, cfg.env.horizon, epochs, seed, &out)
                .with_context(|| format!("pre-training from {}", log.display()))?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("epochs: {epochs}, loss {first:.4} -> {last:.4}");
            }
            println!("model: {}", out.display());
        }
        Command::Compare { config } => {
            let cmp = compare_command(&load(&config)?)?;
            print!("{}", cmp.table);
            println!("csv: {}", cmp.csv_path.display());
        }
        Command::Ablate { config } => {
            let ab = ablation_command(&load(&config)?)?;
            print!("{}", ab.table);
            println!("csv: {}", ab.csv_path.display());
        }
        Command::ExportPlots { metrics } => {
            let out = export_plots(&metrics).with_context(|| format!("exporting {}", metrics.display()))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("odfl: {err:#}");
            ExitCode::FAILURE
        }
    }
}
