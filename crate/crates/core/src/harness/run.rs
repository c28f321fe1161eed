//! Training and evaluation of one configuration.
//!
//! Random streams are forked from the seed by role so that two methods run
//! with the same seed see the same backbone, batches and evaluation sets:
//!
//! | stream      | use                        |
//! |-------------|----------------------------|
//! | 0           | model initialisation       |
//! | 1 + task    | training batches           |
//! | 100 + task  | fixed training-loss probe  |
//! | 200 + task  | held-out evaluation set    |
//! | 300         | replacement noise features |

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use super::config::{ExperimentConfig, Precision, TaskMode};
use super::count::ParamCount;
use super::tasks::{noise_features, TaskKind, TaskSuite};
use crate::backbone::{Model, Sample, VisualMode};
use crate::error::{PetError, Result};
use crate::optim::{lr_factor, AdamW, AdamWConfig};
use crate::tensor::{Real, Rng};

const EVAL_CHUNK: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Ok,
    /// Non-finite loss at the given optimizer step.
    Diverged {
        step: usize,
    },
    /// The cell could not be built or run.
    Error(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Ok => f.write_str("ok"),
            RunStatus::Diverged { step } => write!(f, "diverged@{step}"),
            RunStatus::Error(e) => write!(f, "error: {e}"),
        }
    }
}

impl Serialize for RunStatus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: TaskKind,
    /// Exact-match accuracy of greedy decoding on the held-out set.
    pub exact_match: f64,
    /// Teacher-forced loss on the fixed training probe after training.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub name: String,
    /// Grid cell label; empty outside grids.
    pub cell: String,
    pub method: String,
    pub mode: TaskMode,
    pub seed: u64,
    pub config_hash: String,
    pub scores: Vec<TaskScore>,
    /// Training loss per optimizer step; in single-task mode the per-task
    /// traces are concatenated in task order.
    pub loss_trace: Vec<f64>,
    /// Counts for one model.
    pub params: ParamCount,
    pub wall_time_s: f64,
    pub status: RunStatus,
}

impl RunResult {
    pub fn mean_exact_match(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().map(|s| s.exact_match).sum::<f64>() / self.scores.len() as f64
    }

    pub fn score(&self, task: TaskKind) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.task == task)
    }

    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        a == *other
    }

    /// A placeholder row for a cell that failed before training.
    pub fn failed(cfg: &ExperimentConfig, seed: u64, cell: &str, err: &PetError) -> Self {
        RunResult {
            name: cfg.name.clone(),
            cell: cell.into(),
            method: cfg.method.name.to_string(),
            mode: cfg.train.mode,
            seed,
            config_hash: cfg.hash(),
            scores: Vec::new(),
            loss_trace: Vec::new(),
            params: ParamCount::new(0, 0),
            wall_time_s: 0.0,
            status: RunStatus::Error(err.to_string()),
        }
    }
}

/// Builds the backbone, attaches the planned PET modules and applies the
/// freeze policy. Without an `rng` every weight is zero, which is enough
/// for counting.
pub fn build_model<T: Real>(cfg: &ExperimentConfig, mut rng: Option<&mut Rng>) -> Result<Model<T>> {
    cfg.validate()?;
    let mut model = Model::new(
        &cfg.backbone,
        cfg.freeze.visual_mode,
        cfg.decomposed_spec(),
        cfg.method.init,
        rng.as_deref_mut(),
    )?;
    model.attach(&cfg.attachment_plan()?, cfg.method.init, rng)?;
    model.apply_freeze(&cfg.freeze_policy());
    Ok(model)
}

/// One trained model and the tasks it serves.
#[derive(Clone, Debug)]
pub struct TaskModel<T> {
    pub tasks: Vec<TaskKind>,
    pub model: Model<T>,
}

/// Models for one seed: a single shared model in multi-task mode, one
/// model per task otherwise. All copies start from the same weights.
pub fn build_task_models<T: Real>(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskModel<T>>> {
    let mut rng = Rng::new(seed).fork(0);
    let model = build_model::<T>(cfg, Some(&mut rng))?;
    Ok(match cfg.train.mode {
        TaskMode::Multi => vec![TaskModel {
            tasks: cfg.tasks.names.clone(),
            model,
        }],
        TaskMode::Single => cfg
            .tasks
            .names
            .iter()
            .map(|&t| TaskModel {
                tasks: vec![t],
                model: model.clone(),
            })
            .collect(),
    })
}

fn task_index(suite: &TaskSuite, task: TaskKind) -> u64 {
    suite.tasks().iter().position(|&t| t == task).unwrap_or(0) as u64
}

fn prepare(cfg: &ExperimentConfig, batch: &mut [Sample], noise: &mut Rng) {
    if cfg.freeze.visual_mode == VisualMode::NoiseInput {
        for s in batch {
            noise_features(s, noise);
        }
    }
}

/// Trains `tm.model` on its tasks, interleaving them round-robin. Returns
/// the loss trace, or the step at which the loss stopped being finite.
fn train<T: Real>(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    seed: u64,
    tm: &mut TaskModel<T>,
    trace: &mut Vec<f64>,
) -> Result<Option<usize>> {
    if tm.model.store.trainable_count() == 0 {
        return Ok(None);
    }
    let root = Rng::new(seed);
    let mut streams: Vec<Rng> = tm
        .tasks
        .iter()
        .map(|&t| root.fork(1 + task_index(suite, t)))
        .collect();
    let mut noise = root.fork(300);
    let t = &cfg.train;
    let mut opt = AdamW::new(AdamWConfig {
        lr: t.lr,
        weight_decay: t.weight_decay,
        clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
        ..AdamWConfig::default()
    });
    for step in 0..t.steps {
        let k = step % tm.tasks.len();
        let mut batch = suite.samples(tm.tasks[k], t.batch, &mut streams[k]);
        prepare(cfg, &mut batch, &mut noise);
        let refs: Vec<&Sample> = batch.iter().collect();
        let loss = tm.model.loss_and_grad(&refs)?;
        if !loss.is_finite() {
            return Ok(Some(step));
        }
        trace.push(loss);
        opt.step(
            &mut tm.model.store,
            lr_factor(step, t.steps, t.warmup_ratio),
        );
    }
    Ok(None)
}

fn score<T: Real>(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    seed: u64,
    tm: &TaskModel<T>,
) -> Result<Vec<TaskScore>> {
    let root = Rng::new(seed);
    let mut noise = root.fork(301);
    let mut out = Vec::new();
    for &task in &tm.tasks {
        let idx = task_index(suite, task);
        let mut probe = suite.samples(task, cfg.tasks.train_probe_size, &mut root.fork(100 + idx));
        prepare(cfg, &mut probe, &mut noise);
        let refs: Vec<&Sample> = probe.iter().collect();
        let final_loss = if refs.is_empty() {
            0.0
        } else {
            tm.model.loss(&refs)?
        };

        let mut eval = suite.samples(task, cfg.tasks.eval_size, &mut root.fork(200 + idx));
        prepare(cfg, &mut eval, &mut noise);
        let mut hits = 0usize;
        for chunk in eval.chunks(EVAL_CHUNK) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let preds = tm.model.greedy(&refs, suite.max_target(task))?;
            hits += preds
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.target)
                .count();
        }
        let exact_match = if eval.is_empty() {
            0.0
        } else {
            hits as f64 / eval.len() as f64
        };
        out.push(TaskScore {
            task,
            exact_match,
            final_loss,
        });
    }
    Ok(out)
}

/// Trains and scores one seed, returning the result and the trained models.
pub fn run_seed<T: Real>(
    cfg: &ExperimentConfig,
    seed: u64,
    cell: &str,
) -> Result<(RunResult, Vec<TaskModel<T>>)> {
    let start = Instant::now();
    let suite = TaskSuite::new(&cfg.tasks, &cfg.backbone)?;
    let mut models = build_task_models::<T>(cfg, seed)?;
    let params = ParamCount::new(
        models[0].model.store.trainable_count(),
        models[0].model.store.total_count(),
    );
    let mut trace = Vec::new();
    let mut status = RunStatus::Ok;
    let mut scores = Vec::new();
    for tm in &mut models {
        if let Some(step) = train(cfg, &suite, seed, tm, &mut trace)? {
            status = RunStatus::Diverged { step };
            break;
        }
        scores.extend(score(cfg, &suite, seed, tm)?);
    }
    scores.sort_by_key(|s| task_index(&suite, s.task));
    let result = RunResult {
        name: cfg.name.clone(),
        cell: cell.into(),
        method: cfg.method.name.to_string(),
        mode: cfg.train.mode,
        seed,
        config_hash: cfg.hash(),
        scores,
        loss_trace: trace,
        params,
        wall_time_s: start.elapsed().as_secs_f64(),
        status,
    };
    Ok((result, models))
}

fn run_seed_dispatch(cfg: &ExperimentConfig, seed: u64, cell: &str) -> Result<RunResult> {
    Ok(match cfg.train.precision {
        Precision::F32 => run_seed::<f32>(cfg, seed, cell)?.0,
        Precision::F64 => run_seed::<f64>(cfg, seed, cell)?.0,
    })
}

/// One result per configured seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&seed| run_seed_dispatch(cfg, seed, ""))
        .collect()
}

/// Like [`run_experiment`], but a seed that fails to build yields a failed
/// row instead of an error.
pub fn run_cell(cfg: &ExperimentConfig, cell: &str) -> Vec<RunResult> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            run_seed_dispatch(cfg, seed, cell)
                .unwrap_or_else(|e| RunResult::failed(cfg, seed, cell, &e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Method;

    pub(crate) fn quick() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.d = 16;
        cfg.backbone.heads = 2;
        cfg.backbone.d_ffn = 32;
        cfg.backbone.enc_layers = 1;
        cfg.backbone.dec_layers = 1;
        cfg.backbone.visual_dim = 8;
        cfg.backbone.vocab = 40;
        cfg.backbone.max_len = 24;
        cfg.method.r = 4;
        cfg.method.dec_r = 4;
        cfg.method.heads = 2;
        cfg.train.steps = 6;
        cfg.train.batch = 4;
        cfg.train.precision = Precision::F64;
        cfg.tasks.eval_size = 6;
        cfg.tasks.train_probe_size = 4;
        cfg
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = quick();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.len(), 1);
        assert!(a[0].same_outcome(&b[0]));
        assert_eq!(a[0].loss_trace.len(), 6);
        assert_eq!(a[0].scores.len(), 4);
        assert!(a[0].status.is_ok());
    }

    #[test]
    fn frozen_skips_training() {
        let mut cfg = quick();
        cfg.method.name = Method::Frozen;
        let r = &run_experiment(&cfg).unwrap()[0];
        assert!(r.loss_trace.is_empty());
        assert_eq!(r.params.trainable, 0);
    }

    #[test]
    fn divergence_is_reported_with_its_step() {
        let mut cfg = quick();
        cfg.train.lr = 1e300;
        cfg.train.warmup_ratio = 0.0;
        cfg.train.clip_norm = 0.0;
        let r = &run_experiment(&cfg).unwrap()[0];
        assert!(
            matches!(r.status, RunStatus::Diverged { step } if step > 0),
            "{}",
            r.status
        );
    }

    #[test]
    fn single_task_mode_builds_disjoint_models() {
        let mut cfg = quick();
        cfg.train.mode = TaskMode::Single;
        let models = build_task_models::<f64>(&cfg, 0).unwrap();
        assert_eq!(models.len(), 4);
        let pet = models[0]
            .model
            .store
            .find("pet.enc.0.self_attn_out.down.0")
            .unwrap();
        let p0 = models[0].model.store.get(pet).data().as_ptr();
        let p1 = models[1].model.store.get(pet).data().as_ptr();
        assert_ne!(p0, p1);
        cfg.train.mode = TaskMode::Multi;
        let shared = build_task_models::<f64>(&cfg, 0).unwrap();
        assert_eq!(shared.len(), 1);
        assert_eq!(shared[0].tasks.len(), 4);
    }
}
