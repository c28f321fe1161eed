//! Map from raw visual features into the model width.

use crate::error::{PetError, Result};
use crate::granularity::{GranularityController, GranularityLevel, InitPolicy, Pooling};
use crate::modification::{HeadVariant, MultiHeadModification};
use crate::params::{Fill, Group, Kind, ParamId, ParamStore};
use crate::tensor::{Real, Rng, Tape, Var};

use super::freeze::VisualMode;

/// Shape of the decomposed projector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecomposedSpec {
    pub r: usize,
    pub heads: usize,
    pub gated: bool,
    pub s: f64,
}

#[derive(Clone, Debug)]
pub enum Projector {
    Absent,
    Linear {
        w: ParamId,
        b: ParamId,
    },
    /// `ΔH^vis(F)`, or `G^vis(F) ⊙ ΔH^vis(F)` when gated; no residual path.
    Decomposed {
        delta: MultiHeadModification,
        gate: Option<GranularityController>,
    },
}

impl Projector {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        mode: VisualMode,
        visual_dim: usize,
        d: usize,
        std: f64,
        spec: DecomposedSpec,
        init: InitPolicy,
        mut rng: Option<&mut Rng>,
    ) -> Result<Self> {
        Ok(match mode {
            VisualMode::Absent => Projector::Absent,
            VisualMode::Trainable | VisualMode::Frozen | VisualMode::NoiseInput => {
                let w = store.create(
                    "projector.w",
                    &[visual_dim, d],
                    Fill::Normal(std),
                    rng.as_deref_mut(),
                    Group::Projector,
                    Kind::Weight,
                )?;
                let b = store.create(
                    "projector.b",
                    &[1, d],
                    Fill::Zeros,
                    None,
                    Group::Projector,
                    Kind::Bias,
                )?;
                Projector::Linear { w, b }
            }
            VisualMode::Decomposed => {
                let delta = MultiHeadModification::new(
                    store,
                    "projector.delta",
                    HeadVariant::Down,
                    visual_dim,
                    d,
                    spec.r,
                    spec.heads,
                    init,
                    rng.as_deref_mut(),
                )?;
                let gate = if spec.gated {
                    Some(GranularityController::new(
                        store,
                        "projector",
                        GranularityLevel::Large,
                        visual_dim,
                        d,
                        spec.r,
                        spec.s,
                        init,
                        rng,
                    )?)
                } else {
                    None
                };
                Projector::Decomposed { delta, gate }
            }
        })
    }

    pub fn param_count(
        visual_dim: usize,
        d: usize,
        mode: VisualMode,
        spec: DecomposedSpec,
    ) -> usize {
        match mode {
            VisualMode::Absent => 0,
            VisualMode::Trainable | VisualMode::Frozen | VisualMode::NoiseInput => {
                visual_dim * d + d
            }
            VisualMode::Decomposed => {
                let gate = if spec.gated {
                    GranularityLevel::Large.param_count(visual_dim, d, spec.r)
                } else {
                    0
                };
                HeadVariant::Down.param_count(visual_dim, d, spec.r, spec.heads) + gate
            }
        }
    }

    /// Projects `n × visual_dim` features to `n × d` tokens. With
    /// `force_unit_gate` the decomposed gate is replaced by ones.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: Var,
        force_unit_gate: bool,
    ) -> Result<Var> {
        match self {
            Projector::Absent => Err(PetError::contract(
                "visual features given to a model without a projector",
            )),
            Projector::Linear { w, b } => {
                let (n, c) = tape.shape(feats);
                let wv = store.bind(tape, *w)?;
                let (wr, _) = tape.shape(wv);
                if c != wr {
                    return Err(PetError::dim("project_visual", &[n, c], &[n, wr]));
                }
                let bv = store.bind(tape, *b)?;
                let y = tape.matmul(feats, wv)?;
                tape.add_row(y, bv)
            }
            Projector::Decomposed { delta, gate } => {
                let dh = delta.forward(tape, store, feats)?;
                match gate {
                    Some(g) if !force_unit_gate => {
                        let (n, _) = tape.shape(feats);
                        let gv = g
                            .generate(tape, store, feats, dh, &Pooling::whole(n))?
                            .expect("large gate always produces a matrix");
                        tape.mul(gv, dh)
                    }
                    _ => Ok(dh),
                }
            }
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Projector::Absent)
    }
}
