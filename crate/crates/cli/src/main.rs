//! `pet`: run experiments, ablation grids, parameter counts, gate dumps and
//! the verification suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pet_core::backbone::{checkpoint, Site};
use pet_core::granularity::dump_g;
use pet_core::harness::{
    count_params, default_gate_site, emit_results, gate_matrix, instantiated_count, run_grid,
    run_seed, Axis, ExperimentConfig, GateRequest, Precision, RunResult, TaskKind,
};
use pet_core::tensor::Real;
use pet_core::verify::run_suite_with;

#[derive(Parser)]
#[command(
    name = "pet",
    version,
    about = "Granularity-controlled parameter-efficient tuning on a toy encoder-decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; every key is optional.
    config: PathBuf,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one config for every seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for results.csv and results.json.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Save the first seed's trained weights here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every cell along one ablation axis.
    Grid {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// level, sites, cross, ln, heads, variant, r, init, s, visual_mode, task_mode or method.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Trainable and total parameter counts.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also build the model and confirm the counts agree.
        #[arg(long)]
        instantiate: bool,
    },
    /// Write the gate matrix of one site for one example as CSV.
    DumpG {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Site name such as `enc.0.self_attn_out`.
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Training steps before reading the gate.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Read weights from a checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "caption")]
        task: String,
        /// Index of the held-out example.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run the verification suite; exits nonzero on any failure.
    Verify {
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

fn print_results(results: &[RunResult]) {
    for r in results {
        let scores: Vec<String> = r
            .scores
            .iter()
            .map(|s| format!("{}={:.3}/{:.3}", s.task, s.exact_match, s.final_loss))
            .collect();
        println!(
            "{}\t{}\tseed={}\t{}\tmean_em={:.3}\ttrainable={:.2}%\t{}",
            if r.cell.is_empty() { &r.name } else { &r.cell },
            r.method,
            r.seed,
            scores.join(" "),
            r.mean_exact_match(),
            r.params.percentage,
            r.status
        );
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run_with_checkpoint<T: Real>(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<RunResult>> {
    let mut results = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let (result, models) = run_seed::<T>(cfg, seed, "")?;
        if i == 0 {
            ensure_parent(path)?;
            checkpoint::save(path, &models[0].model.store)?;
        }
        results.push(result);
    }
    Ok(results)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            cfg,
            out,
            checkpoint,
        } => {
            let cfg = cfg.load()?;
            let results = match (&checkpoint, cfg.train.precision) {
                (None, _) => pet_core::harness::run_experiment(&cfg)?,
                (Some(p), Precision::F32) => run_with_checkpoint::<f32>(&cfg, p)?,
                (Some(p), Precision::F64) => run_with_checkpoint::<f64>(&cfg, p)?,
            };
            print_results(&results);
            emit_results(&results, std::slice::from_ref(&cfg), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Grid {
            cfg,
            axis,
            out,
            workers,
        } => {
            let cfg = cfg.load()?;
            let axis: Axis = axis.parse()?;
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let results = run_grid(&cfg, axis, workers)?;
            print_results(&results);
            let configs: Vec<ExperimentConfig> = pet_core::harness::grid_cells(&cfg, axis)
                .into_iter()
                .map(|c| c.config)
                .collect();
            emit_results(&results, &configs, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Count { cfg, instantiate } => {
            let cfg = cfg.load()?;
            let c = count_params(&cfg)?;
            println!("method\t{}", cfg.method.name);
            println!("trainable\t{}", c.trainable);
            println!("total\t{}", c.total);
            println!("percentage\t{:.4}", c.percentage);
            if instantiate {
                let built = instantiated_count(&cfg)?;
                println!("instantiated_trainable\t{}", built.trainable);
                println!("instantiated_total\t{}", built.total);
                if built != c {
                    bail!("analytic and instantiated counts differ");
                }
            }
        }
        Command::DumpG {
            cfg,
            site,
            out,
            steps,
            checkpoint,
            task,
            index,
        } => {
            let cfg = cfg.load()?;
            let site: Site = match site {
                Some(s) => s.parse()?,
                None => default_gate_site(),
            };
            let task: TaskKind = task.parse()?;
            let req = GateRequest {
                site,
                steps,
                checkpoint,
                task,
                index,
            };
            let g = gate_matrix(&cfg, &req)?;
            ensure_parent(&out)?;
            dump_g(&out, &g)?;
            let (n, d) = g.dims2()?;
            println!("wrote {n}x{d} gate of {site} to {}", out.display());
        }
        Command::Verify { filter } => {
            let summary = run_suite_with(filter.as_deref(), |o| println!("{o}"));
            println!(
                "summary\tpassed={}\tfailed={}",
                summary.passed(),
                summary.failed()
            );
            if !summary.success() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
