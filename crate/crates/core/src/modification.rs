//! Producers of the modular modification `ΔH`.
//!
//! [`MultiHeadModification`] is a bottleneck `gelu(X·W_down)·W_up` whose
//! down and/or up projection is split into heads. [`Modification`] wraps it
//! together with the Adapter and LoRA baselines so every method plugs into
//! the same controlled update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::granularity::InitPolicy;
use crate::params::{Group, Kind, ParamId, ParamStore};
use crate::tensor::{Real, Rng, Tape, Var};

/// Which projection(s) of the bottleneck are split into heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// `gelu(Concat_i(X·W_down^i))·W_up`
    Down,
    /// `Concat_i(gelu(X·W_down)·W_up^i)`
    Up,
    /// Split on both sides.
    DownUp,
    /// `Concat_i(gelu(X·W_down^i)·W_up^i)`, one small bottleneck per head.
    DownUpPair,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::Down,
        HeadVariant::Up,
        HeadVariant::DownUp,
        HeadVariant::DownUpPair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Down => "down",
            HeadVariant::Up => "up",
            HeadVariant::DownUp => "down_up",
            HeadVariant::DownUpPair => "down_up_pair",
        }
    }

    fn splits_down(self) -> bool {
        !matches!(self, HeadVariant::Up)
    }

    fn splits_up(self) -> bool {
        !matches!(self, HeadVariant::Down)
    }

    /// Weight count for the given widths and head count.
    pub fn param_count(self, d_in: usize, d_out: usize, r: usize, heads: usize) -> usize {
        match self {
            HeadVariant::DownUpPair => d_in * r + r * d_out / heads,
            _ => d_in * r + r * d_out,
        }
    }

    /// Checks the divisibility constraints for this variant.
    pub fn validate(self, d_out: usize, r: usize, heads: usize) -> Result<()> {
        if heads == 0 || r == 0 {
            return Err(PetError::config("r and head count must be positive"));
        }
        if self.splits_down() && !r.is_multiple_of(heads) {
            return Err(PetError::config(format!(
                "{self} modification needs heads ({heads}) to divide r ({r})"
            )));
        }
        if self.splits_up() && !d_out.is_multiple_of(heads) {
            return Err(PetError::config(format!(
                "{self} modification needs heads ({heads}) to divide d ({d_out})"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadVariant {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PetError::config(format!("unknown head variant {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadModification {
    variant: HeadVariant,
    d_in: usize,
    d_out: usize,
    r: usize,
    heads: usize,
    downs: Vec<ParamId>,
    ups: Vec<ParamId>,
}

impl MultiHeadModification {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        variant: HeadVariant,
        d_in: usize,
        d_out: usize,
        r: usize,
        heads: usize,
        init: InitPolicy,
        mut rng: Option<&mut Rng>,
    ) -> Result<Self> {
        variant.validate(d_out, r, heads)?;
        let (n_down, down_shape) = if variant.splits_down() {
            (heads, [d_in, r / heads])
        } else {
            (1, [d_in, r])
        };
        let (n_up, up_shape) = match variant {
            HeadVariant::Down => (1, [r, d_out]),
            HeadVariant::Up | HeadVariant::DownUp => (heads, [r, d_out / heads]),
            HeadVariant::DownUpPair => (heads, [r / heads, d_out / heads]),
        };
        let mut downs = Vec::with_capacity(n_down);
        for i in 0..n_down {
            downs.push(store.create(
                format!("{prefix}.down.{i}"),
                &down_shape,
                init.down_fill(),
                rng.as_deref_mut(),
                Group::Pet,
                Kind::Weight,
            )?);
        }
        let mut ups = Vec::with_capacity(n_up);
        for i in 0..n_up {
            ups.push(store.create(
                format!("{prefix}.up.{i}"),
                &up_shape,
                init.up_fill(),
                rng.as_deref_mut(),
                Group::Pet,
                Kind::Weight,
            )?);
        }
        Ok(Self {
            variant,
            d_in,
            d_out,
            r,
            heads,
            downs,
            ups,
        })
    }

    pub fn variant(&self) -> HeadVariant {
        self.variant
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn param_count(&self) -> usize {
        self.variant
            .param_count(self.d_in, self.d_out, self.r, self.heads)
    }

    pub fn down_ids(&self) -> &[ParamId] {
        &self.downs
    }

    pub fn up_ids(&self) -> &[ParamId] {
        &self.ups
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let (n, c) = tape.shape(x);
        if c != self.d_in {
            return Err(PetError::dim("modification", &[n, c], &[n, self.d_in]));
        }
        let mut down_out = Vec::with_capacity(self.downs.len());
        for &w in &self.downs {
            let w = store.bind(tape, w)?;
            down_out.push(tape.matmul(x, w)?);
        }
        if self.variant == HeadVariant::DownUpPair {
            let mut outs = Vec::with_capacity(self.heads);
            for (&a, &u) in down_out.iter().zip(&self.ups) {
                let a = tape.gelu(a);
                let u = store.bind(tape, u)?;
                outs.push(tape.matmul(a, u)?);
            }
            return concat(tape, &outs);
        }
        let hidden = concat(tape, &down_out)?;
        let hidden = tape.gelu(hidden);
        let mut outs = Vec::with_capacity(self.ups.len());
        for &u in &self.ups {
            let u = store.bind(tape, u)?;
            outs.push(tape.matmul(hidden, u)?);
        }
        concat(tape, &outs)
    }
}

fn concat<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(parts)
    }
}

/// Low-rank update `X·A·B` for a frozen projection `X·W`.
#[derive(Clone, Debug)]
pub struct LoraModification {
    a: ParamId,
    b: ParamId,
    d_in: usize,
    d_out: usize,
    r: usize,
}

impl LoraModification {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        r: usize,
        init: InitPolicy,
        mut rng: Option<&mut Rng>,
    ) -> Result<Self> {
        if r == 0 {
            return Err(PetError::config("LoRA rank must be positive"));
        }
        let a = store.create(
            format!("{prefix}.lora_a"),
            &[d_in, r],
            init.down_fill(),
            rng.as_deref_mut(),
            Group::Pet,
            Kind::Weight,
        )?;
        let b = store.create(
            format!("{prefix}.lora_b"),
            &[r, d_out],
            init.up_fill(),
            rng,
            Group::Pet,
            Kind::Weight,
        )?;
        Ok(Self {
            a,
            b,
            d_in,
            d_out,
            r,
        })
    }

    pub fn param_count(&self) -> usize {
        self.r * (self.d_in + self.d_out)
    }

    pub fn ids(&self) -> (ParamId, ParamId) {
        (self.a, self.b)
    }

    /// `X·A·B`
    pub fn delta<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = store.bind(tape, self.a)?;
        let b = store.bind(tape, self.b)?;
        let xa = tape.matmul(x, a)?;
        tape.matmul(xa, b)
    }

    /// `X·W + X·A·B`
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        w: Var,
    ) -> Result<Var> {
        let base = tape.matmul(x, w)?;
        let delta = self.delta(tape, store, x)?;
        tape.add(base, delta)
    }
}

/// Any producer of `ΔH`.
#[derive(Clone, Debug)]
pub enum Modification {
    MultiHead(MultiHeadModification),
    /// Single-head bottleneck; the residual is added by the controlled update.
    Adapter(MultiHeadModification),
    Lora(LoraModification),
}

impl Modification {
    #[allow(clippy::too_many_arguments)]
    pub fn adapter<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        r: usize,
        init: InitPolicy,
        rng: Option<&mut Rng>,
    ) -> Result<Self> {
        MultiHeadModification::new(
            store,
            prefix,
            HeadVariant::Down,
            d_in,
            d_out,
            r,
            1,
            init,
            rng,
        )
        .map(Modification::Adapter)
    }

    pub fn param_count(&self) -> usize {
        match self {
            Modification::MultiHead(m) | Modification::Adapter(m) => m.param_count(),
            Modification::Lora(l) => l.param_count(),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        match self {
            Modification::MultiHead(m) | Modification::Adapter(m) => m.forward(tape, store, x),
            Modification::Lora(l) => l.delta(tape, store, x),
        }
    }

    /// Parameters that the zero-up init policy sets to zero.
    pub fn up_ids(&self) -> Vec<ParamId> {
        match self {
            Modification::MultiHead(m) | Modification::Adapter(m) => m.up_ids().to_vec(),
            Modification::Lora(l) => vec![l.b],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn build(
        variant: HeadVariant,
        d: usize,
        r: usize,
        heads: usize,
    ) -> (ParamStore<f64>, MultiHeadModification) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let m = MultiHeadModification::new(
            &mut store,
            "m",
            variant,
            d,
            d,
            r,
            heads,
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .unwrap();
        (store, m)
    }

    #[test]
    fn counts_match_instantiated_weights() {
        for variant in HeadVariant::ALL {
            for (d, r, h) in [(4, 4, 2), (8, 4, 4), (16, 8, 1), (768, 96, 4)] {
                let (store, m) = build(variant, d, r, h);
                assert_eq!(
                    store.total_count(),
                    m.param_count(),
                    "{variant} d={d} r={r} h={h}"
                );
            }
        }
        assert_eq!(HeadVariant::DownUpPair.param_count(4, 4, 4, 2), 24);
    }

    #[test]
    fn pair_variant_count_shrinks_with_heads() {
        let counts: Vec<usize> = [1, 2, 4, 8]
            .iter()
            .map(|&h| HeadVariant::DownUpPair.param_count(64, 64, 16, h))
            .collect();
        assert!(counts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn divisibility_is_checked_at_construction() {
        let mut store = ParamStore::<f64>::new();
        let r = MultiHeadModification::new(
            &mut store,
            "m",
            HeadVariant::Down,
            4,
            4,
            3,
            2,
            InitPolicy::ZeroUp,
            None,
        );
        assert!(matches!(r, Err(PetError::Config(_))));
        let r = MultiHeadModification::new(
            &mut store,
            "u",
            HeadVariant::Up,
            6,
            6,
            4,
            4,
            InitPolicy::ZeroUp,
            None,
        );
        assert!(matches!(r, Err(PetError::Config(_))));
    }

    #[test]
    fn outputs_keep_shape() {
        for variant in HeadVariant::ALL {
            let (store, m) = build(variant, 8, 4, 2);
            let mut tape = Tape::new();
            let x = tape
                .constant(&Tensor::randn(&[5, 8], 1.0, &mut Rng::new(1)))
                .unwrap();
            let y = m.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y), (5, 8));
        }
    }

    #[test]
    fn zero_up_gives_zero_delta() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let m = MultiHeadModification::new(
            &mut store,
            "m",
            HeadVariant::Down,
            8,
            8,
            4,
            2,
            InitPolicy::ZeroUp,
            Some(&mut rng),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(&Tensor::randn(&[3, 8], 1.0, &mut rng))
            .unwrap();
        let y = m.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }
}
