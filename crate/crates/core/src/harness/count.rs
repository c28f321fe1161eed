//! Closed-form parameter accounting.
//!
//! The count never builds a model; `instantiated_count` does, and the two
//! must agree exactly. The percentage denominator is backbone + PET +
//! projector, so the frozen feature extractor that produced the visual
//! features is excluded.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::run::build_model;
use crate::backbone::{Projector, VisualMode};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub percentage: f64,
}

impl ParamCount {
    pub fn new(trainable: usize, total: usize) -> Self {
        let percentage = if total == 0 {
            0.0
        } else {
            100.0 * trainable as f64 / total as f64
        };
        Self {
            trainable,
            total,
            percentage,
        }
    }
}

/// Analytic trainable and total counts for `cfg`.
pub fn count_params(cfg: &ExperimentConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let b = &cfg.backbone;
    let d = b.d;
    let policy = cfg.freeze_policy();
    let plan = cfg.attachment_plan()?;
    let pet: usize = plan.iter().map(|s| s.param_count(d)).sum();
    let mode = cfg.freeze.visual_mode;
    let projector = Projector::param_count(b.visual_dim, d, mode, cfg.decomposed_spec());
    let backbone = b.backbone_params();

    let backbone_trainable = if !policy.backbone_frozen {
        backbone
    } else {
        let enc_norm = if policy.encoder_ln_trainable {
            b.encoder_norm_params()
        } else {
            0
        };
        let dec_norm = if policy.decoder_ln_trainable {
            b.decoder_norm_params()
        } else {
            0
        };
        let biases = if policy.biases_trainable {
            // LayerNorm shifts already counted with their norms are not
            // counted twice.
            let enc_shift = if policy.encoder_ln_trainable {
                b.encoder_norm_params() / 2
            } else {
                0
            };
            let dec_shift = if policy.decoder_ln_trainable {
                b.decoder_norm_params() / 2
            } else {
                0
            };
            b.bias_params() - enc_shift - dec_shift
        } else {
            0
        };
        enc_norm + dec_norm + biases
    };
    let pet_trainable = if policy.pet_trainable { pet } else { 0 };
    let projector_trainable = match mode {
        VisualMode::Decomposed if policy.pet_trainable => projector,
        VisualMode::Decomposed => 0,
        _ if policy.visual_mode != VisualMode::Frozen => projector,
        _ => 0,
    };
    debug_assert!(
        cfg.method.name != Method::Frozen
            || backbone_trainable + pet_trainable + projector_trainable == 0
    );
    Ok(ParamCount::new(
        backbone_trainable + pet_trainable + projector_trainable,
        backbone + pet + projector,
    ))
}

/// Counts by building a zero-filled model and reading its trainable flags.
pub fn instantiated_count(cfg: &ExperimentConfig) -> Result<ParamCount> {
    let model = build_model::<f32>(cfg, None)?;
    Ok(ParamCount::new(
        model.store.trainable_count(),
        model.store.total_count(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::GranularityLevel;

    #[test]
    fn bart_base_large_and_small() {
        let large = count_params(&ExperimentConfig::bart_base_accounting(Method::Vlpet(
            GranularityLevel::Large,
        )))
        .unwrap();
        assert_eq!(large.trainable, 6_017_280);
        assert_eq!(large.total, 145_417_728);
        for level in [
            GranularityLevel::Small,
            GranularityLevel::MiddleX,
            GranularityLevel::MiddleY,
        ] {
            let c = count_params(&ExperimentConfig::bart_base_accounting(Method::Vlpet(
                level,
            )))
            .unwrap();
            assert!(
                (c.percentage - 2.98).abs() < 0.35,
                "{level}: {}",
                c.percentage
            );
            assert!(c.trainable < large.trainable);
        }
    }

    #[test]
    fn analytic_matches_instantiated_for_every_method() {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.vocab = 40;
        for method in Method::all() {
            for mode in VisualMode::ALL {
                cfg.method.name = method;
                cfg.freeze.visual_mode = mode;
                let a = count_params(&cfg).unwrap();
                let b = instantiated_count(&cfg).unwrap();
                assert_eq!(a, b, "{method} / {mode:?}");
            }
        }
    }

    #[test]
    fn frozen_trains_nothing() {
        let mut cfg = ExperimentConfig::default();
        cfg.method.name = Method::Frozen;
        assert_eq!(count_params(&cfg).unwrap().trainable, 0);
    }
}
