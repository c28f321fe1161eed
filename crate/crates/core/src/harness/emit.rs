//! `results.csv` and the `results.json` sidecar.
//!
//! CSV columns, in order: `config_hash, name, cell, method, seed, mode`,
//! then `em_<task>` and `loss_<task>` for every task present (in canonical
//! task order), then `mean_em, trainable, total, percentage, wall_time_s,
//! status`. Output depends only on the inputs, so re-emitting the same
//! results gives byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{ExperimentConfig, TaskMode};
use super::run::RunResult;
use super::tasks::TaskKind;
use crate::error::Result;

fn task_columns(results: &[RunResult]) -> Vec<TaskKind> {
    TaskKind::ALL
        .into_iter()
        .filter(|t| results.iter().any(|r| r.score(*t).is_some()))
        .collect()
}

pub fn write_csv(results: &[RunResult], path: &Path) -> Result<()> {
    let tasks = task_columns(results);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["config_hash", "name", "cell", "method", "seed", "mode"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in &tasks {
        header.push(format!("em_{t}"));
        header.push(format!("loss_{t}"));
    }
    header.extend(
        [
            "mean_em",
            "trainable",
            "total",
            "percentage",
            "wall_time_s",
            "status",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in results {
        let mode = match r.mode {
            TaskMode::Multi => "multi",
            TaskMode::Single => "single",
        };
        let mut row = vec![
            r.config_hash.clone(),
            r.name.clone(),
            r.cell.clone(),
            r.method.clone(),
            r.seed.to_string(),
            mode.to_string(),
        ];
        for &t in &tasks {
            match r.score(t) {
                Some(s) => {
                    row.push(s.exact_match.to_string());
                    row.push(s.final_loss.to_string());
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.extend([
            r.mean_exact_match().to_string(),
            r.params.trainable.to_string(),
            r.params.total.to_string(),
            r.params.percentage.to_string(),
            r.wall_time_s.to_string(),
            r.status.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    /// Full configs keyed by their hash.
    configs: BTreeMap<String, &'a ExperimentConfig>,
    results: &'a [RunResult],
}

pub fn write_json(results: &[RunResult], configs: &[ExperimentConfig], path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        configs: configs.iter().map(|c| (c.hash(), c)).collect(),
        results,
    };
    fs::write(path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Writes `results.csv` and `results.json` into `dir`, creating it if needed.
pub fn emit_results(results: &[RunResult], configs: &[ExperimentConfig], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(results, &dir.join("results.csv"))?;
    write_json(results, configs, &dir.join("results.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_results_give_a_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        emit_results(&[], &[], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("config_hash,name,cell,method,seed,mode,mean_em"));
    }
}
