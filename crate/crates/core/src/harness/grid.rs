//! Ablation grids: one config per cell along a single axis.
//!
//! Every cell reuses the base seed list, so rows with equal seeds are
//! paired comparisons. Cells run on worker threads; results come back in
//! cell order.

use std::fmt;
use std::str::FromStr;
use std::thread;

use super::config::{conventional_decoder, ExperimentConfig, Method, TaskMode};
use super::run::{run_cell, RunResult};
use crate::backbone::VisualMode;
use crate::error::{PetError, Result};
use crate::granularity::{GranularityLevel, InitPolicy};
use crate::modification::HeadVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Encoder gate level, `identity` being the ungated update.
    Level,
    /// Non-empty subsets of the decoder sublayer sites.
    Sites,
    /// Which cross-attention output the decoder module modifies.
    Cross,
    /// Trainable encoder / decoder LayerNorms.
    Ln,
    Heads,
    Variant,
    R,
    Init,
    S,
    VisualMode,
    TaskMode,
    Method,
}

impl Axis {
    pub const ALL: [Axis; 12] = [
        Axis::Level,
        Axis::Sites,
        Axis::Cross,
        Axis::Ln,
        Axis::Heads,
        Axis::Variant,
        Axis::R,
        Axis::Init,
        Axis::S,
        Axis::VisualMode,
        Axis::TaskMode,
        Axis::Method,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Level => "level",
            Axis::Sites => "sites",
            Axis::Cross => "cross",
            Axis::Ln => "ln",
            Axis::Heads => "heads",
            Axis::Variant => "variant",
            Axis::R => "r",
            Axis::Init => "init",
            Axis::S => "s",
            Axis::VisualMode => "visual_mode",
            Axis::TaskMode => "task_mode",
            Axis::Method => "method",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| PetError::config(format!("unknown grid axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: ExperimentConfig,
}

fn cell(
    base: &ExperimentConfig,
    label: impl Into<String>,
    edit: impl FnOnce(&mut ExperimentConfig),
) -> GridCell {
    let mut config = base.clone();
    edit(&mut config);
    GridCell {
        label: label.into(),
        config,
    }
}

fn mark(on: bool) -> char {
    if on {
        'Y'
    } else {
        'N'
    }
}

/// The configs along `axis`, derived from `base`.
pub fn grid_cells(base: &ExperimentConfig, axis: Axis) -> Vec<GridCell> {
    match axis {
        Axis::Level => GranularityLevel::ALL
            .into_iter()
            .rev()
            .map(|l| cell(base, l.as_str(), |c| c.method.name = Method::Vlpet(l)))
            .collect(),
        Axis::Sites => {
            let names = conventional_decoder();
            (1u32..8)
                .map(|mask| {
                    let on: Vec<bool> = (0..3).map(|i| mask & (1 << i) != 0).collect();
                    let label = format!(
                        "self={} cross={} ff={}",
                        mark(on[0]),
                        mark(on[1]),
                        mark(on[2])
                    );
                    let sites = names
                        .iter()
                        .zip(&on)
                        .filter(|(_, &o)| o)
                        .map(|(n, _)| n.clone())
                        .collect();
                    cell(base, label, |c| c.method.decoder_sites = sites)
                })
                .collect()
        }
        Axis::Cross => ["cross_attn_out", "cross_attn_key", "cross_attn_value"]
            .into_iter()
            .map(|s| cell(base, s, |c| c.method.decoder_sites = vec![s.to_string()]))
            .collect(),
        Axis::Ln => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(e, d)| {
                cell(
                    base,
                    format!("enc_ln={} dec_ln={}", mark(e), mark(d)),
                    |c| {
                        c.freeze.encoder_ln = e;
                        c.freeze.decoder_ln = d;
                    },
                )
            })
            .collect(),
        Axis::Heads => [1, 2, 4, 8]
            .into_iter()
            .map(|h| cell(base, format!("heads={h}"), |c| c.method.heads = h))
            .collect(),
        Axis::Variant => HeadVariant::ALL
            .into_iter()
            .map(|v| cell(base, v.as_str(), |c| c.method.variant = v))
            .collect(),
        Axis::R => [4, 8, 16, 32]
            .into_iter()
            .map(|r| {
                cell(base, format!("r={r}"), |c| {
                    c.method.r = r;
                    c.method.dec_r = r;
                })
            })
            .collect(),
        Axis::Init => [InitPolicy::GaussianAll, InitPolicy::ZeroUp]
            .into_iter()
            .map(|i| {
                let label = match i {
                    InitPolicy::GaussianAll => "gaussian_all",
                    InitPolicy::ZeroUp => "zero_up",
                };
                cell(base, label, |c| c.method.init = i)
            })
            .collect(),
        Axis::S => [0.3, 0.5, 1.0, 2.0]
            .into_iter()
            .map(|s| cell(base, format!("s={s}"), |c| c.method.s = s))
            .collect(),
        Axis::VisualMode => {
            let mut cells: Vec<GridCell> = VisualMode::ALL
                .into_iter()
                .map(|m| {
                    cell(base, m.as_str(), |c| {
                        c.freeze.visual_mode = m;
                        c.freeze.visual_gate = false;
                    })
                })
                .collect();
            cells.push(cell(base, "decomposed_gated", |c| {
                c.freeze.visual_mode = VisualMode::Decomposed;
                c.freeze.visual_gate = true;
            }));
            cells
        }
        Axis::TaskMode => [TaskMode::Single, TaskMode::Multi]
            .into_iter()
            .map(|m| {
                let label = match m {
                    TaskMode::Single => "single",
                    TaskMode::Multi => "multi",
                };
                cell(base, label, |c| c.train.mode = m)
            })
            .collect(),
        Axis::Method => Method::all()
            .into_iter()
            .map(|m| cell(base, m.to_string(), |c| c.method.name = m))
            .collect(),
    }
}

/// Runs every cell of `axis` for every seed. Cells that fail to build are
/// recorded as failed rows; the rest of the grid still runs.
pub fn run_grid(base: &ExperimentConfig, axis: Axis, workers: usize) -> Result<Vec<RunResult>> {
    base.validate()?;
    let cells = grid_cells(base, axis);
    let workers = workers.max(1).min(cells.len().max(1));
    let mut slots: Vec<Option<Vec<RunResult>>> = vec![None; cells.len()];
    thread::scope(|scope| {
        let chunks: Vec<Vec<(usize, &GridCell)>> = (0..workers)
            .map(|w| cells.iter().enumerate().skip(w).step_by(workers).collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, c)| (i, run_cell(&c.config, &c.label)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, rows) in h.join().expect("grid worker panicked") {
                slots[i] = Some(rows);
            }
        }
    });
    Ok(slots.into_iter().flatten().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::count::count_params;

    #[test]
    fn axis_sizes() {
        let base = ExperimentConfig::default();
        let sizes: Vec<usize> = Axis::ALL
            .iter()
            .map(|&a| grid_cells(&base, a).len())
            .collect();
        assert_eq!(
            sizes,
            vec![5, 7, 3, 4, 4, 4, 4, 2, 4, 6, 2, Method::all().len()]
        );
    }

    #[test]
    fn site_cells_are_distinct_and_non_empty() {
        let cells = grid_cells(&ExperimentConfig::default(), Axis::Sites);
        let mut seen: Vec<Vec<String>> = cells
            .iter()
            .map(|c| c.config.method.decoder_sites.clone())
            .collect();
        assert!(seen.iter().all(|s| !s.is_empty()));
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn large_level_has_the_most_parameters() {
        let cells = grid_cells(&ExperimentConfig::default(), Axis::Level);
        let counts: Vec<usize> = cells
            .iter()
            .map(|c| count_params(&c.config).unwrap().trainable)
            .collect();
        let large = counts[cells.iter().position(|c| c.label == "large").unwrap()];
        assert!(counts.iter().all(|&n| n <= large));
        assert_eq!(counts.iter().filter(|&&n| n == large).count(), 1);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in Axis::ALL {
            assert_eq!(a.as_str().parse::<Axis>().unwrap(), a);
        }
    }
}
