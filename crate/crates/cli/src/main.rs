//! `mvcr`: train, evaluate, inspect and sweep MVCR models on synthetic tasks.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mvcr_core::config::{resolve_output, ExperimentConfig};
use mvcr_core::experiments::{
    builtin_grid, eval_checkpoint, inspect_checkpoint, run_fig1, run_grid, strictly_ordered, train_experiment,
    write_fig1, AblationGrid, Fig1Config, GRID_NAMES,
};

#[derive(Parser)]
#[command(name = "mvcr", version, about = "Multi-view compressed representations on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes the run log, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value`, applied after the config file (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default: `output.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the dev and test splits of its config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep the stochastic MVCR path at inference.
        #[arg(long)]
        with_mvcr: bool,
    },
    /// Train autoencoders of several widths on noisy digits; writes PGM grids and an MSE table.
    Fig1Demo {
        #[arg(long, value_delimiter = ',', default_value = "49,98,392")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        /// Train against clean images instead of the noisy inputs.
        #[arg(long)]
        clean_target: bool,
        #[arg(long, default_value = "runs/fig1")]
        out: PathBuf,
    },
    /// Expand a sweep grid into runs and write the comparison CSV.
    Ablate {
        /// Grid file, or `builtin:<name>`.
        #[arg(long)]
        grid: String,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Write the built-in grid files into a directory.
    Grids {
        #[arg(long, default_value = "grids")]
        out: PathBuf,
    },
    /// Print parameter counts per group and check plug-out size equality.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, overrides: &[String], out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    let dir = out.map_or_else(|| cfg.resolved_output_dir(), |p| resolve_output(&p));
    let summary = train_experiment(&cfg, Some(&dir)).with_context(|| format!("training into {}", dir.display()))?;
    eprintln!("artifacts in {}", dir.display());
    print_json(&summary)
}

fn load_grid(spec: &str) -> Result<AblationGrid> {
    Ok(match spec.strip_prefix("builtin:") {
        Some(name) => builtin_grid(name)?,
        None => AblationGrid::load(Path::new(spec))?,
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, overrides, out } => train(&config, seed, &overrides, out),
        Command::Eval { checkpoint, with_mvcr } => print_json(&eval_checkpoint(&checkpoint, with_mvcr)?),
        Command::Fig1Demo { dims, sigma, seeds, epochs, train_size, clean_target, out } => {
            let out = resolve_output(&out);
            let mut ordered = true;
            for seed in seeds {
                let defaults = Fig1Config::default();
                let cfg = Fig1Config {
                    dims: dims.clone(),
                    sigma,
                    seed,
                    epochs: epochs.unwrap_or(defaults.epochs),
                    train_size: train_size.unwrap_or(defaults.train_size),
                    clean_target,
                    ..defaults
                };
                let result = run_fig1(&cfg)?;
                let dir = out.join(format!("seed{seed}"));
                write_fig1(&result, &dir)?;
                println!("seed {seed}: {}", dir.display());
                println!("{:>6} {:>12} {:>12}", "dim", "mse_clean", "mse_noisy");
                for r in &result.rows {
                    println!("{:>6} {:>12.6} {:>12.6}", r.dim, r.mse_clean, r.mse_noisy);
                }
                ordered &= strictly_ordered(&result.rows);
            }
            println!("clean MSE strictly decreasing in width on every seed: {ordered}");
            Ok(())
        }
        Command::Ablate { grid, overrides, seeds, jobs, out } => {
            let mut g = load_grid(&grid)?;
            for kv in &overrides {
                g.override_base(kv)?;
            }
            if let Some(s) = seeds {
                if s.is_empty() {
                    bail!("--seeds needs at least one seed");
                }
                g.seeds = s;
            }
            if let Some(j) = jobs {
                g.jobs = j.max(1);
            }
            let out = resolve_output(&out);
            let mut progress = std::io::stderr();
            let result = run_grid(&g, Some(&out), Some(&mut progress))?;
            let mut seen = Vec::new();
            for r in &result.rows {
                if !seen.contains(&r.point) {
                    println!(
                        "{:<16} {:<10} mean {:.4} ± {:.4}   group {:.4} ± {:.4}",
                        r.point, r.group, r.point_mean, r.point_stddev, r.group_mean, r.group_stddev
                    );
                    seen.push(r.point.clone());
                }
            }
            if let Some(csv) = result.csv {
                println!("{}", csv.display());
            }
            Ok(())
        }
        Command::Grids { out } => {
            std::fs::create_dir_all(&out)?;
            for name in GRID_NAMES {
                let path = out.join(format!("{name}.grid"));
                std::fs::write(&path, builtin_grid(name)?.to_text())?;
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Inspect { checkpoint } => print_json(&inspect_checkpoint(&checkpoint)?),
    }
}
