//! Gate inspection for trained or checkpointed models.

use std::path::PathBuf;

use super::config::{ExperimentConfig, Precision};
use super::run::{build_model, run_seed};
use super::tasks::{TaskKind, TaskSuite};
use crate::backbone::{checkpoint, Model, Sample, Site, SiteKind};
use crate::error::{PetError, Result};
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GateRequest {
    pub site: Site,
    /// Training steps before reading the gate; ignored with a checkpoint.
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
    pub task: TaskKind,
    /// Which held-out example of `task` to feed.
    pub index: usize,
}

impl GateRequest {
    pub fn new(site: Site) -> Self {
        Self {
            site,
            steps: 50,
            checkpoint: None,
            task: TaskKind::Caption,
            index: 0,
        }
    }
}

/// First encoder self-attention output site, where the gate is dumped by
/// default.
pub fn default_gate_site() -> Site {
    Site::new(SiteKind::EncSelfAttnOut, 0)
}

fn example(cfg: &ExperimentConfig, seed: u64, req: &GateRequest) -> Result<Sample> {
    let suite = TaskSuite::new(&cfg.tasks, &cfg.backbone)?;
    let idx = suite
        .tasks()
        .iter()
        .position(|&t| t == req.task)
        .unwrap_or(0) as u64;
    let mut rng = Rng::new(seed).fork(200 + idx);
    Ok(suite
        .samples(req.task, req.index + 1, &mut rng)
        .pop()
        .expect("at least one sample"))
}

fn model_for<T: Real>(cfg: &ExperimentConfig, seed: u64, req: &GateRequest) -> Result<Model<T>> {
    if let Some(path) = &req.checkpoint {
        let mut model = build_model::<T>(cfg, None)?;
        checkpoint::load_into(path, &mut model.store)?;
        return Ok(model);
    }
    let mut cfg = cfg.clone();
    cfg.train.steps = req.steps;
    let (_, models) = run_seed::<T>(&cfg, seed, "")?;
    models
        .into_iter()
        .find(|m| m.tasks.contains(&req.task))
        .map(|m| m.model)
        .ok_or_else(|| PetError::config(format!("task {} is not configured", req.task)))
}

fn gate<T: Real>(cfg: &ExperimentConfig, req: &GateRequest) -> Result<Tensor<f64>> {
    let seed = cfg.seeds[0];
    let model = model_for::<T>(cfg, seed, req)?;
    let sample = example(cfg, seed, req)?;
    Ok(model.gate_matrix(&sample, req.site)?.cast())
}

/// The `N × d` gate at `req.site` for one held-out example, using the first
/// configured seed.
pub fn gate_matrix(cfg: &ExperimentConfig, req: &GateRequest) -> Result<Tensor<f64>> {
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => gate::<f32>(cfg, req),
        Precision::F64 => gate::<f64>(cfg, req),
    }
}
