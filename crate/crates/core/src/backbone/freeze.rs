//! Which tensors stay trainable alongside the PET modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Real;

/// How visual features reach the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// Trainable linear projector.
    Trainable,
    /// Linear projector kept at its initial weights.
    Frozen,
    /// No visual tokens and no projector.
    Absent,
    /// Trainable projector fed with `U[0, 1)` noise instead of features.
    NoiseInput,
    /// Multi-head bottleneck without residual, optionally gated.
    Decomposed,
}

impl VisualMode {
    pub const ALL: [VisualMode; 5] = [
        VisualMode::Trainable,
        VisualMode::Frozen,
        VisualMode::Absent,
        VisualMode::NoiseInput,
        VisualMode::Decomposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VisualMode::Trainable => "trainable",
            VisualMode::Frozen => "frozen",
            VisualMode::Absent => "absent",
            VisualMode::NoiseInput => "noise_input",
            VisualMode::Decomposed => "decomposed",
        }
    }
}

impl fmt::Display for VisualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VisualMode {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        VisualMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PetError::config(format!("unknown visual mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezePolicy {
    pub backbone_frozen: bool,
    pub encoder_ln_trainable: bool,
    pub decoder_ln_trainable: bool,
    /// Unfreezes every linear bias and LayerNorm shift.
    pub biases_trainable: bool,
    pub pet_trainable: bool,
    pub visual_mode: VisualMode,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            backbone_frozen: true,
            encoder_ln_trainable: true,
            decoder_ln_trainable: false,
            biases_trainable: false,
            pet_trainable: true,
            visual_mode: VisualMode::Trainable,
        }
    }
}

impl FreezePolicy {
    /// Nothing trains; the untouched backbone serves as a floor.
    pub fn all_frozen(visual_mode: VisualMode) -> Self {
        Self {
            backbone_frozen: true,
            encoder_ln_trainable: false,
            decoder_ln_trainable: false,
            biases_trainable: false,
            pet_trainable: false,
            visual_mode: match visual_mode {
                VisualMode::Absent => VisualMode::Absent,
                _ => VisualMode::Frozen,
            },
        }
    }

    pub fn trains(&self, group: Group, is_bias: bool) -> bool {
        let bias = self.biases_trainable && is_bias;
        match group {
            Group::Backbone => !self.backbone_frozen || bias,
            Group::EncoderNorm => !self.backbone_frozen || self.encoder_ln_trainable || bias,
            Group::DecoderNorm => !self.backbone_frozen || self.decoder_ln_trainable || bias,
            Group::Projector => self.visual_mode != VisualMode::Frozen,
            Group::Pet => self.pet_trainable,
        }
    }

    /// Sets `requires_grad` on every stored tensor.
    pub fn apply<T: Real>(&self, store: &mut ParamStore<T>) {
        let flags: Vec<_> = store
            .iter()
            .map(|(id, e)| (id, self.trains(e.group, e.kind.is_bias())))
            .collect();
        for (id, flag) in flags {
            store.set_trainable(id, flag);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_policy_matches_lightweight_recipe() {
        let p = FreezePolicy::default();
        assert!(!p.trains(Group::Backbone, false));
        assert!(!p.trains(Group::Backbone, true));
        assert!(p.trains(Group::EncoderNorm, false));
        assert!(!p.trains(Group::DecoderNorm, false));
        assert!(p.trains(Group::Projector, false));
        assert!(p.trains(Group::Pet, false));
    }

    #[test]
    fn all_frozen_trains_nothing() {
        let p = FreezePolicy::all_frozen(VisualMode::Trainable);
        for g in [
            Group::Backbone,
            Group::EncoderNorm,
            Group::DecoderNorm,
            Group::Projector,
            Group::Pet,
        ] {
            assert!(!p.trains(g, false));
            assert!(!p.trains(g, true));
        }
    }
}
