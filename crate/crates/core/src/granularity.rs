//! Granularity-controlled gates and the controlled update `G ⊙ (H + ΔH)`.
//!
//! A [`GranularityController`] owns the weights for one gate level and
//! produces an `N × d` matrix `G` from the module input `X` and output `H`:
//!
//! | level    | generated matrix                                   | weights |
//! |----------|----------------------------------------------------|---------|
//! | Large    | `s·σ(gelu(X·W_down)·W_up)`                         | `2dr`   |
//! | MiddleX  | `s·σ((X+H)·w)` repeated across columns             | `d`     |
//! | MiddleY  | `s·(σ(z)+1)` repeated across rows                  | `d`     |
//! | Small    | `s·mean(σ([X,H]·w))` repeated everywhere           | `2d`    |
//! | Identity | all ones                                           | `0`     |
//!
//! None of the projections carry a bias.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::params::{Fill, Group, Kind, ParamId, ParamStore};
use crate::tensor::{Real, Rng, Segment, Tape, Tensor, Var};

/// Standard deviation of Gaussian-initialised PET weights.
pub const PET_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityLevel {
    Large,
    #[serde(rename = "middlex")]
    MiddleX,
    #[serde(rename = "middley")]
    MiddleY,
    Small,
    Identity,
}

impl GranularityLevel {
    pub const ALL: [GranularityLevel; 5] = [
        GranularityLevel::Identity,
        GranularityLevel::Small,
        GranularityLevel::MiddleX,
        GranularityLevel::MiddleY,
        GranularityLevel::Large,
    ];

    /// Weight count of a generator reading `d_in`-wide inputs and writing
    /// `d`-wide gates.
    pub fn param_count(self, d_in: usize, d: usize, r: usize) -> usize {
        match self {
            GranularityLevel::Large => d_in * r + r * d,
            GranularityLevel::MiddleX | GranularityLevel::MiddleY => d,
            GranularityLevel::Small => 2 * d,
            GranularityLevel::Identity => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GranularityLevel::Large => "large",
            GranularityLevel::MiddleX => "middlex",
            GranularityLevel::MiddleY => "middley",
            GranularityLevel::Small => "small",
            GranularityLevel::Identity => "identity",
        }
    }
}

impl fmt::Display for GranularityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GranularityLevel {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        GranularityLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| PetError::config(format!("unknown granularity level {s:?}")))
    }
}

/// Weight initialisation for PET modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Every PET weight drawn from `N(0, 0.02²)`.
    GaussianAll,
    /// Up projections start at zero, everything else Gaussian.
    ZeroUp,
}

impl InitPolicy {
    pub(crate) fn up_fill(self) -> Fill {
        match self {
            InitPolicy::GaussianAll => Fill::Normal(PET_INIT_STD),
            InitPolicy::ZeroUp => Fill::Zeros,
        }
    }

    pub(crate) fn down_fill(self) -> Fill {
        Fill::Normal(PET_INIT_STD)
    }
}

/// Row-to-sequence assignment used by the small-level average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooling {
    assign: Vec<Option<usize>>,
    groups: usize,
}

impl Pooling {
    /// All `n` rows form one sequence.
    pub fn whole(n: usize) -> Self {
        Self {
            assign: vec![Some(0); n],
            groups: 1,
        }
    }

    /// One sequence; rows with `keep[i] == false` are padding.
    pub fn masked(keep: &[bool]) -> Self {
        Self {
            assign: keep.iter().map(|&k| k.then_some(0)).collect(),
            groups: 1,
        }
    }

    /// Packed batch: each segment is its own sequence.
    pub fn segments(total_rows: usize, segs: &[Segment]) -> Self {
        let mut assign = vec![None; total_rows];
        for (g, &(start, len)) in segs.iter().enumerate() {
            for slot in &mut assign[start..start + len] {
                *slot = Some(g);
            }
        }
        Self {
            assign,
            groups: segs.len(),
        }
    }

    pub fn rows(&self) -> usize {
        self.assign.len()
    }

    fn expand_index(&self) -> Vec<usize> {
        // Padding rows reuse group 0; their gate value is never observed.
        self.assign.iter().map(|g| g.unwrap_or(0)).collect()
    }
}

#[derive(Clone, Debug)]
enum Weights {
    Large { down: ParamId, up: ParamId },
    MiddleX { down: ParamId },
    MiddleY { z: ParamId },
    Small { down: ParamId },
    Identity,
}

/// One gate generator and its weights.
#[derive(Clone, Debug)]
pub struct GranularityController {
    level: GranularityLevel,
    d_in: usize,
    d: usize,
    r: usize,
    s: f64,
    weights: Weights,
}

impl GranularityController {
    /// Registers the weights for `level` under `prefix` in `store`.
    ///
    /// `d_in` is the width of `X`; only the large level may have `d_in != d`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level: GranularityLevel,
        d_in: usize,
        d: usize,
        r: usize,
        s: f64,
        init: InitPolicy,
        mut rng: Option<&mut Rng>,
    ) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(PetError::config(format!(
                "scaling factor must be positive, got {s}"
            )));
        }
        if level == GranularityLevel::Large && r == 0 {
            return Err(PetError::config("large gate needs r >= 1"));
        }
        if !matches!(level, GranularityLevel::Large | GranularityLevel::Identity) && d_in != d {
            return Err(PetError::config(format!(
                "{level} gate needs input width {d}, got {d_in}"
            )));
        }
        let mut mk = |name: &str, shape: &[usize], fill: Fill| {
            store.create(
                format!("{prefix}.{name}"),
                shape,
                fill,
                rng.as_deref_mut(),
                Group::Pet,
                Kind::Weight,
            )
        };
        let weights = match level {
            GranularityLevel::Large => Weights::Large {
                down: mk("g_down", &[d_in, r], init.down_fill())?,
                up: mk("g_up", &[r, d], init.up_fill())?,
            },
            GranularityLevel::MiddleX => Weights::MiddleX {
                down: mk("g_down", &[d, 1], init.down_fill())?,
            },
            GranularityLevel::MiddleY => Weights::MiddleY {
                z: mk("g_z", &[1, d], Fill::Zeros)?,
            },
            GranularityLevel::Small => Weights::Small {
                down: mk("g_down", &[2 * d, 1], init.down_fill())?,
            },
            GranularityLevel::Identity => Weights::Identity,
        };
        Ok(Self {
            level,
            d_in,
            d,
            r,
            s,
            weights,
        })
    }

    pub fn level(&self) -> GranularityLevel {
        self.level
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn param_count(&self) -> usize {
        self.level.param_count(self.d_in, self.d, self.r)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.weights {
            Weights::Large { down, up } => vec![down, up],
            Weights::MiddleX { down } | Weights::Small { down } => vec![down],
            Weights::MiddleY { z } => vec![z],
            Weights::Identity => vec![],
        }
    }

    fn check_width(
        &self,
        tape: &Tape<impl Real>,
        v: Var,
        want: usize,
        op: &'static str,
    ) -> Result<()> {
        let (n, c) = tape.shape(v);
        if c != want {
            return Err(PetError::dim(op, &[n, c], &[n, want]));
        }
        Ok(())
    }

    fn wrong_level(&self, wanted: GranularityLevel) -> PetError {
        PetError::contract(format!(
            "{} controller asked for a {wanted} gate",
            self.level
        ))
    }

    /// `s · σ(gelu(X·W_down)·W_up)`
    pub fn gen_large<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let Weights::Large { down, up } = self.weights else {
            return Err(self.wrong_level(GranularityLevel::Large));
        };
        self.check_width(tape, x, self.d_in, "gen_g_large")?;
        let wd = store.bind(tape, down)?;
        let wu = store.bind(tape, up)?;
        let a = tape.matmul(x, wd)?;
        let a = tape.gelu(a);
        let a = tape.matmul(a, wu)?;
        let a = tape.sigmoid(a);
        Ok(tape.scale(a, self.s))
    }

    /// `s · σ((X+H)·w) · 1_{1×d}`
    pub fn gen_middle_x<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let Weights::MiddleX { down } = self.weights else {
            return Err(self.wrong_level(GranularityLevel::MiddleX));
        };
        self.check_width(tape, x, self.d, "gen_g_middle_x")?;
        let w = store.bind(tape, down)?;
        let sum = tape.add(x, h)?;
        let col = tape.matmul(sum, w)?;
        let col = tape.sigmoid(col);
        let col = tape.scale(col, self.s);
        tape.broadcast_cols(col, self.d)
    }

    /// `1_{N×1} · s · (σ(z) + 1)`: one learned row shared by every
    /// position. Broadcasting the middleX column here would be a typo.
    pub fn gen_middle_y<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        n: usize,
    ) -> Result<Var> {
        let Weights::MiddleY { z } = self.weights else {
            return Err(self.wrong_level(GranularityLevel::MiddleY));
        };
        if n < 1 {
            return Err(PetError::contract("middleY gate needs at least one row"));
        }
        let z = store.bind(tape, z)?;
        let row = tape.sigmoid(z);
        let row = tape.add_scalar(row, 1.0);
        let row = tape.scale(row, self.s);
        tape.broadcast_rows(row, n)
    }

    /// `s · ψ(σ([X, H]·w))` filled into every entry of each sequence's rows.
    pub fn gen_small<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
        pool: &Pooling,
    ) -> Result<Var> {
        let Weights::Small { down } = self.weights else {
            return Err(self.wrong_level(GranularityLevel::Small));
        };
        self.check_width(tape, x, self.d, "gen_g_small")?;
        let (n, _) = tape.shape(x);
        if pool.rows() != n {
            return Err(PetError::dim("gen_g_small pooling", &[n], &[pool.rows()]));
        }
        let w = store.bind(tape, down)?;
        let xh = tape.concat_cols(&[x, h])?;
        let col = tape.matmul(xh, w)?;
        let col = tape.sigmoid(col);
        let pooled = tape.group_mean(col, pool.assign.clone(), pool.groups)?;
        let pooled = tape.scale(pooled, self.s);
        let per_row = tape.group_expand(pooled, pool.expand_index())?;
        tape.broadcast_cols(per_row, self.d)
    }

    /// The gate for this level, or `None` for Identity (a gate of all ones).
    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
        pool: &Pooling,
    ) -> Result<Option<Var>> {
        let (n, _) = tape.shape(h);
        Ok(match self.level {
            GranularityLevel::Large => Some(self.gen_large(tape, store, x)?),
            GranularityLevel::MiddleX => Some(self.gen_middle_x(tape, store, x, h)?),
            GranularityLevel::MiddleY => Some(self.gen_middle_y(tape, store, n)?),
            GranularityLevel::Small => Some(self.gen_small(tape, store, x, h, pool)?),
            GranularityLevel::Identity => None,
        })
    }

    /// Evaluates the gate outside of training; convenient for inspection.
    pub fn evaluate<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        h: &Tensor<T>,
        pool: &Pooling,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x)?;
        let hv = tape.constant(h)?;
        match self.generate(&mut tape, store, xv, hv, pool)? {
            Some(g) => Ok(tape.tensor(g)),
            None => Ok(Tensor::ones(h.shape())),
        }
    }
}

/// `G ⊙ (H + ΔH)`; `None` stands for the all-ones gate and yields `H + ΔH`.
pub fn apply_update<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    delta: Var,
    g: Option<Var>,
) -> Result<Var> {
    let sum = tape.add(h, delta)?;
    match g {
        Some(g) => tape.mul(g, sum),
        None => Ok(sum),
    }
}

/// `H + ΔH + G`, the additive variant.
pub fn apply_update_add<T: Real>(tape: &mut Tape<T>, h: Var, delta: Var, g: Var) -> Result<Var> {
    let sum = tape.add(h, delta)?;
    tape.add(sum, g)
}

/// Writes `g` as CSV: one row per sequence position, one column per
/// hidden unit, with a `pos,g0,g1,...` header.
pub fn dump_g<T: Real>(path: &Path, g: &Tensor<T>) -> Result<()> {
    let (rows, cols) = g.dims2()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::with_capacity(cols + 1);
    header.push("pos".to_string());
    header.extend((0..cols).map(|j| format!("g{j}")));
    w.write_record(&header)?;
    for i in 0..rows {
        let mut rec = Vec::with_capacity(cols + 1);
        rec.push(i.to_string());
        rec.extend((0..cols).map(|j| format!("{:e}", g.at(i, j).as_f64())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn controller(
        level: GranularityLevel,
        d: usize,
        r: usize,
        s: f64,
        seed: u64,
    ) -> (ParamStore<f64>, GranularityController) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let ctl = GranularityController::new(
            &mut store,
            "gate",
            level,
            d,
            d,
            r,
            s,
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .unwrap();
        (store, ctl)
    }

    #[test]
    fn zero_input_gives_half_scale() {
        let (store, ctl) = controller(GranularityLevel::Large, 4, 2, 0.7, 1);
        let x = Tensor::zeros(&[3, 4]);
        let g = ctl.evaluate(&store, &x, &x, &Pooling::whole(3)).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.35).abs() < 1e-15));
    }

    #[test]
    fn middle_x_cancels_to_half_scale() {
        let (store, ctl) = controller(GranularityLevel::MiddleX, 3, 1, 2.0, 2);
        let x = Tensor::randn(&[4, 3], 1.0, &mut Rng::new(5));
        let neg = Tensor::new(&[4, 3], x.data().iter().map(|v| -v).collect()).unwrap();
        let g = ctl.evaluate(&store, &x, &neg, &Pooling::whole(4)).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn middle_y_starts_at_one_and_a_half_scale() {
        let (store, ctl) = controller(GranularityLevel::MiddleY, 5, 1, 1.0, 3);
        let x = Tensor::zeros(&[2, 5]);
        let g = ctl.evaluate(&store, &x, &x, &Pooling::whole(2)).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.5));
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            ctl.gen_middle_y(&mut tape, &store, 0),
            Err(PetError::Contract(_))
        ));
    }

    #[test]
    fn small_rejects_fully_masked_input() {
        let (store, ctl) = controller(GranularityLevel::Small, 3, 1, 1.0, 4);
        let x = Tensor::zeros(&[2, 3]);
        let r = ctl.evaluate(&store, &x, &x, &Pooling::masked(&[false, false]));
        assert!(matches!(r, Err(PetError::Contract(_))));
    }

    #[test]
    fn level_mismatch_is_a_contract_error() {
        let (store, ctl) = controller(GranularityLevel::Small, 3, 1, 1.0, 4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            ctl.gen_large(&mut tape, &store, x),
            Err(PetError::Contract(_))
        ));
    }

    #[test]
    fn closed_form_counts() {
        for (d, r) in [(8, 4), (768, 96)] {
            for level in GranularityLevel::ALL {
                let (store, ctl) = controller(level, d, r, 1.0, 0);
                assert_eq!(store.total_count(), ctl.param_count());
            }
            assert_eq!(GranularityLevel::Large.param_count(d, d, r), 2 * d * r);
            assert_eq!(GranularityLevel::Small.param_count(d, d, r), 2 * d);
        }
        assert_eq!(GranularityLevel::Large.param_count(768, 768, 96), 147_456);
    }

    #[test]
    fn level_names_round_trip() {
        for level in GranularityLevel::ALL {
            assert_eq!(level.as_str().parse::<GranularityLevel>().unwrap(), level);
        }
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let r = GranularityController::new(
            &mut store,
            "g",
            GranularityLevel::Large,
            4,
            4,
            2,
            0.0,
            InitPolicy::ZeroUp,
            None,
        );
        assert!(matches!(r, Err(PetError::Config(_))));
    }
}
