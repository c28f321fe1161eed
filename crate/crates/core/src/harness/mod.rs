//! Experiment runner: synthetic tasks, configs, parameter accounting, ablation
//! grids and result files.

pub mod config;
pub mod count;
pub mod emit;
pub mod grid;
pub mod inspect;
pub mod run;
pub mod tasks;

pub use config::{
    ExperimentConfig, FreezeConfig, Method, MethodConfig, Precision, TaskMode, TrainConfig,
};
pub use count::{count_params, instantiated_count, ParamCount};
pub use emit::{emit_results, write_csv, write_json};
pub use grid::{grid_cells, run_grid, Axis, GridCell};
pub use inspect::{default_gate_site, gate_matrix, GateRequest};
pub use run::{
    build_model, build_task_models, run_experiment, run_seed, RunResult, RunStatus, TaskModel,
    TaskScore,
};
pub use tasks::{TaskConfig, TaskKind, TaskSuite};
