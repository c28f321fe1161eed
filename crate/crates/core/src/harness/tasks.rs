//! Synthetic vision-language tasks over a grid of symbols.
//!
//! Each example shows a `side × side` grid; cell `i` carries the feature
//! vector of its symbol from a fixed codebook (the stand-in for a frozen
//! vision encoder). Four tasks read the grid in different ways:
//!
//! | task    | input             | target                         |
//! |---------|-------------------|--------------------------------|
//! | lookup  | `lookup: rI cJ`   | symbol in row I, column J      |
//! | match   | `match: S`        | `true` if S is in the grid     |
//! | copy    | `copy: A B C`     | `A B C`                        |
//! | caption | `caption:`        | all cells in raster order      |
//!
//! Every target ends with `EOS`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Sample, EOS};
use crate::error::{PetError, Result};
use crate::tensor::Rng;

pub const PROMPT_COPY: usize = 3;
pub const PROMPT_LOOKUP: usize = 4;
pub const PROMPT_MATCH: usize = 5;
pub const PROMPT_CAPTION: usize = 6;
pub const TRUE: usize = 7;
pub const FALSE: usize = 8;
/// First row-coordinate token; column tokens follow the row tokens.
pub const COORD_BASE: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Lookup,
    Match,
    Copy,
    Caption,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Lookup,
        TaskKind::Match,
        TaskKind::Copy,
        TaskKind::Caption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Lookup => "lookup",
            TaskKind::Match => "match",
            TaskKind::Copy => "copy",
            TaskKind::Caption => "caption",
        }
    }

    pub fn prompt(self) -> usize {
        match self {
            TaskKind::Lookup => PROMPT_LOOKUP,
            TaskKind::Match => PROMPT_MATCH,
            TaskKind::Copy => PROMPT_COPY,
            TaskKind::Caption => PROMPT_CAPTION,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PetError::config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub names: Vec<TaskKind>,
    pub symbols: usize,
    pub copy_min: usize,
    pub copy_max: usize,
    /// Seed of the symbol feature codebook, fixed across experiments.
    pub codebook_seed: u64,
    /// Std of Gaussian noise added to every visual feature.
    pub feature_noise: f64,
    pub eval_size: usize,
    /// Examples per task in the fixed set used for the final training loss.
    pub train_probe_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            names: TaskKind::ALL.to_vec(),
            symbols: 16,
            copy_min: 3,
            copy_max: 6,
            codebook_seed: 7,
            feature_noise: 0.0,
            eval_size: 100,
            train_probe_size: 64,
        }
    }
}

/// Generator for every task over one backbone shape.
#[derive(Clone, Debug)]
pub struct TaskSuite {
    cfg: TaskConfig,
    side: usize,
    visual_dim: usize,
    symbol_base: usize,
    codebook: Vec<Vec<f64>>,
}

impl TaskSuite {
    pub fn new(cfg: &TaskConfig, backbone: &BackboneConfig) -> Result<Self> {
        let side = (backbone.visual_tokens as f64).sqrt().round() as usize;
        if side * side != backbone.visual_tokens || side == 0 {
            return Err(PetError::config(format!(
                "visual_tokens = {} is not a square grid",
                backbone.visual_tokens
            )));
        }
        if cfg.names.is_empty() {
            return Err(PetError::config("task list is empty"));
        }
        if cfg.copy_min == 0 || cfg.copy_min > cfg.copy_max || cfg.symbols < 2 {
            return Err(PetError::config(
                "copy length range or symbol count is invalid",
            ));
        }
        let symbol_base = COORD_BASE + 2 * side;
        if symbol_base + cfg.symbols > backbone.vocab {
            return Err(PetError::config(format!(
                "vocab {} is too small for {} symbols and a {side}x{side} grid",
                backbone.vocab, cfg.symbols
            )));
        }
        let longest = backbone.visual_tokens + 1 + cfg.copy_max;
        if longest > backbone.max_len || backbone.visual_tokens + 2 > backbone.max_len {
            return Err(PetError::config("max_len is too small for the task suite"));
        }
        let mut rng = Rng::new(cfg.codebook_seed);
        let codebook = (0..cfg.symbols)
            .map(|_| (0..backbone.visual_dim).map(|_| rng.normal()).collect())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            side,
            visual_dim: backbone.visual_dim,
            symbol_base,
            codebook,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn tasks(&self) -> &[TaskKind] {
        &self.cfg.names
    }

    pub fn symbol_token(&self, s: usize) -> usize {
        self.symbol_base + s
    }

    fn features(&self, grid: &[usize], rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len() * self.visual_dim);
        for &s in grid {
            for &v in &self.codebook[s] {
                let noise = if self.cfg.feature_noise > 0.0 {
                    self.cfg.feature_noise * rng.normal()
                } else {
                    0.0
                };
                out.push(v + noise);
            }
        }
        out
    }

    /// Draws one example of `task`.
    pub fn sample(&self, task: TaskKind, rng: &mut Rng) -> Sample {
        let n = self.side * self.side;
        let grid: Vec<usize> = (0..n).map(|_| rng.below(self.cfg.symbols)).collect();
        let (text, target) = match task {
            TaskKind::Lookup => {
                let (r, c) = (rng.below(self.side), rng.below(self.side));
                let text = vec![PROMPT_LOOKUP, COORD_BASE + r, COORD_BASE + self.side + c];
                (text, vec![self.symbol_token(grid[r * self.side + c]), EOS])
            }
            TaskKind::Match => {
                let present = rng.coin();
                let absent: Vec<usize> = (0..self.cfg.symbols)
                    .filter(|s| !grid.contains(s))
                    .collect();
                let (s, answer) = if present || absent.is_empty() {
                    (grid[rng.below(n)], TRUE)
                } else {
                    (absent[rng.below(absent.len())], FALSE)
                };
                (vec![PROMPT_MATCH, self.symbol_token(s)], vec![answer, EOS])
            }
            TaskKind::Copy => {
                let len = self.cfg.copy_min + rng.below(self.cfg.copy_max - self.cfg.copy_min + 1);
                let span: Vec<usize> = (0..len)
                    .map(|_| self.symbol_token(rng.below(self.cfg.symbols)))
                    .collect();
                let mut text = vec![PROMPT_COPY];
                text.extend_from_slice(&span);
                let mut target = span;
                target.push(EOS);
                (text, target)
            }
            TaskKind::Caption => {
                let mut target: Vec<usize> = grid.iter().map(|&s| self.symbol_token(s)).collect();
                target.push(EOS);
                (vec![PROMPT_CAPTION], target)
            }
        };
        Sample {
            visual: self.features(&grid, rng),
            text,
            target,
        }
    }

    pub fn samples(&self, task: TaskKind, count: usize, rng: &mut Rng) -> Vec<Sample> {
        (0..count).map(|_| self.sample(task, rng)).collect()
    }

    /// Longest target any example of `task` can have, `EOS` included.
    pub fn max_target(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Lookup | TaskKind::Match => 2,
            TaskKind::Copy => self.cfg.copy_max + 1,
            TaskKind::Caption => self.side * self.side + 1,
        }
    }
}

/// Replaces visual features with `U[0, 1)` noise of the same size.
pub fn noise_features(sample: &mut Sample, rng: &mut Rng) {
    for v in &mut sample.visual {
        *v = rng.uniform();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> TaskSuite {
        TaskSuite::new(&TaskConfig::default(), &BackboneConfig::toy()).unwrap()
    }

    #[test]
    fn lookup_answers_the_named_cell() {
        let s = suite();
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let ex = s.sample(TaskKind::Lookup, &mut rng);
            let r = ex.text[1] - COORD_BASE;
            let c = ex.text[2] - COORD_BASE - 3;
            let feats = &ex.visual[(r * 3 + c) * 32..(r * 3 + c + 1) * 32];
            let sym = ex.target[0] - s.symbol_token(0);
            assert_eq!(feats, s.codebook[sym].as_slice());
            assert_eq!(ex.target[1], EOS);
        }
    }

    #[test]
    fn match_is_roughly_balanced_and_correct() {
        let s = suite();
        let mut rng = Rng::new(2);
        let mut yes = 0;
        for _ in 0..400 {
            let ex = s.sample(TaskKind::Match, &mut rng);
            let sym = ex.text[1] - s.symbol_token(0);
            let in_grid = (0..9).any(|i| ex.visual[i * 32..(i + 1) * 32] == s.codebook[sym][..]);
            assert_eq!(ex.target[0] == TRUE, in_grid);
            yes += usize::from(in_grid);
        }
        assert!((150..250).contains(&yes), "{yes}");
    }

    #[test]
    fn copy_and_caption_targets() {
        let s = suite();
        let mut rng = Rng::new(3);
        let ex = s.sample(TaskKind::Copy, &mut rng);
        assert_eq!(&ex.text[1..], &ex.target[..ex.target.len() - 1]);
        let ex = s.sample(TaskKind::Caption, &mut rng);
        assert_eq!(ex.target.len(), 10);
        assert!(ex.target.len() <= s.max_target(TaskKind::Caption));
    }

    #[test]
    fn sampling_is_seeded() {
        let s = suite();
        let a = s.samples(TaskKind::Caption, 5, &mut Rng::new(9));
        let b = s.samples(TaskKind::Caption, 5, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn small_vocab_is_rejected() {
        let mut b = BackboneConfig::toy();
        b.vocab = 20;
        assert!(TaskSuite::new(&TaskConfig::default(), &b).is_err());
    }
}
