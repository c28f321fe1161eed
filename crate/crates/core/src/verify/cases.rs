//! The executable cases behind `run_suite`.
//!
//! Each case returns a metric that the runner compares against the case's
//! tolerance, or an error message describing the first violated property.

use super::gradcheck::{grad_check, Corrupted, GradCheckReport, TapeObjective};
use super::naive::{self, Mat};
use super::{freeze_audit, OracleCase, OracleKind};
use crate::backbone::{
    checkpoint, AttachmentSpec, BackboneConfig, Combine, DecomposedSpec, DeltaSpec, FreezePolicy,
    Model, Projector, Sample, Site, SiteKind, VisualMode,
};
use crate::granularity::{
    apply_update, apply_update_add, GranularityController, GranularityLevel, InitPolicy, Pooling,
};
use crate::harness::config::{conventional_decoder, ExperimentConfig, Method, Precision, TaskMode};
use crate::harness::count::{count_params, instantiated_count, ParamCount};
use crate::harness::emit::emit_results;
use crate::harness::grid::{grid_cells, Axis};
use crate::harness::run::{build_task_models, run_seed, RunResult, RunStatus, TaskScore};
use crate::harness::tasks::{TaskKind, TaskSuite};
use crate::modification::{HeadVariant, LoraModification, Modification, MultiHeadModification};
use crate::params::{Group, Kind, ParamId, ParamStore};
use crate::tensor::{Rng, Tape, Tensor, Var};

type Check = std::result::Result<f64, String>;

/// Random cases per scalar-loop oracle.
const CASES: usize = 120;

pub(super) fn all() -> Vec<OracleCase> {
    use OracleKind::*;
    vec![
        OracleCase::new(
            "tensor/gradcheck_ops",
            FiniteDiff,
            1e-4,
            11,
            tensor_gradcheck_ops,
        ),
        OracleCase::new(
            "granularity/large_scalar_loop",
            ScalarLoop,
            1e-12,
            21,
            || generator_oracle(GranularityLevel::Large),
        ),
        OracleCase::new(
            "granularity/middle_x_scalar_loop",
            ScalarLoop,
            1e-12,
            22,
            || generator_oracle(GranularityLevel::MiddleX),
        ),
        OracleCase::new(
            "granularity/middle_y_scalar_loop",
            ScalarLoop,
            1e-12,
            23,
            || generator_oracle(GranularityLevel::MiddleY),
        ),
        OracleCase::new(
            "granularity/small_scalar_loop",
            ScalarLoop,
            1e-12,
            24,
            || generator_oracle(GranularityLevel::Small),
        ),
        OracleCase::new(
            "granularity/identity_update",
            AlgebraicEquiv,
            0.0,
            25,
            identity_update,
        ),
        OracleCase::new(
            "granularity/additive_update",
            ScalarLoop,
            1e-12,
            26,
            additive_update,
        ),
        OracleCase::new(
            "granularity/param_counts",
            AlgebraicEquiv,
            0.0,
            27,
            generator_param_counts,
        ),
        OracleCase::new(
            "granularity/gradcheck",
            FiniteDiff,
            1e-4,
            28,
            generator_gradcheck,
        ),
        OracleCase::new(
            "modifications/head_concat_equivalence",
            AlgebraicEquiv,
            1e-12,
            31,
            head_concat_equivalence,
        ),
        OracleCase::new(
            "modifications/pair_witness",
            AlgebraicEquiv,
            1e-12,
            32,
            pair_witness,
        ),
        OracleCase::new(
            "modifications/param_counts",
            AlgebraicEquiv,
            0.0,
            33,
            modification_param_counts,
        ),
        OracleCase::new(
            "modifications/lora_scalar_loop",
            ScalarLoop,
            1e-12,
            34,
            lora_scalar_loop,
        ),
        OracleCase::new(
            "modifications/gradcheck",
            FiniteDiff,
            1e-4,
            35,
            modification_gradcheck,
        ),
        OracleCase::new(
            "backbone/vanilla_reference",
            ScalarLoop,
            1e-10,
            41,
            vanilla_reference,
        ),
        OracleCase::new(
            "backbone/identity_attachment",
            AlgebraicEquiv,
            0.0,
            42,
            identity_attachment,
        ),
        OracleCase::new(
            "backbone/packed_batch",
            AlgebraicEquiv,
            1e-12,
            43,
            packed_batch,
        ),
        OracleCase::new("backbone/site_wiring", AlgebraicEquiv, 0.0, 44, site_wiring),
        OracleCase::new(
            "backbone/gradcheck_projector",
            FiniteDiff,
            1e-4,
            45,
            projector_gradcheck,
        ),
        OracleCase::new(
            "backbone/gradcheck_model",
            FiniteDiff,
            1e-4,
            46,
            model_gradcheck,
        ),
        OracleCase::new(
            "backbone/freeze_audit",
            Freeze,
            0.0,
            47,
            freeze_after_training,
        ),
        OracleCase::new(
            "backbone/checkpoint_round_trip",
            Determinism,
            0.0,
            48,
            checkpoint_round_trip,
        ),
        OracleCase::new(
            "harness/bart_percentages",
            ScalarLoop,
            0.35,
            51,
            bart_percentages,
        ),
        OracleCase::new(
            "harness/analytic_equals_instantiated",
            AlgebraicEquiv,
            0.0,
            52,
            analytic_equals_instantiated,
        ),
        OracleCase::new(
            "harness/percentage_monotonicity",
            AlgebraicEquiv,
            0.0,
            53,
            percentage_monotonicity,
        ),
        OracleCase::new(
            "harness/config_round_trip",
            Determinism,
            0.0,
            54,
            config_round_trip,
        ),
        OracleCase::new(
            "harness/shared_module",
            AlgebraicEquiv,
            0.0,
            55,
            shared_module,
        ),
        OracleCase::new("harness/task_prompts", ScalarLoop, 0.0, 56, task_prompts),
        OracleCase::new(
            "harness/grid_structure",
            AlgebraicEquiv,
            0.0,
            57,
            grid_structure,
        ),
        OracleCase::new(
            "harness/emit_determinism",
            Determinism,
            0.0,
            58,
            emit_determinism,
        ),
        OracleCase::new(
            "harness/run_determinism",
            Determinism,
            0.0,
            59,
            run_determinism,
        ),
        OracleCase::new(
            "verify/gradcheck_negative_control",
            FiniteDiff,
            0.0,
            61,
            gradcheck_negative_control,
        ),
        OracleCase::new(
            "verify/freeze_negative_control",
            Freeze,
            0.0,
            62,
            freeze_negative_control,
        ),
    ]
}

// ------------------------------------------------------------------
// Helpers
// ------------------------------------------------------------------

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2().expect("matrix");
    Mat::from_vec(r, c, t.data().to_vec())
}

fn randn(r: usize, c: usize, std: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(&[r, c], std, rng)
}

/// `max |a - b| / max(1, |b|)`.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], std: f64, rng: &mut Rng) {
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = std * rng.normal();
        }
    }
}

/// Random packing of `n` rows into contiguous segments.
fn random_segments(n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 1 + rng.below(n - start);
        segs.push((start, len));
        start += len;
    }
    segs
}

fn check_reports(reports: &[GradCheckReport]) -> Check {
    let mut worst = 0.0f64;
    for r in reports {
        if !r.passed {
            return Err(format!(
                "{} / {}: rel err {:.3e} at element {}",
                r.op, r.param, r.max_rel_err, r.worst
            ));
        }
        worst = worst.max(r.max_rel_err);
    }
    ensure(!reports.is_empty(), || {
        "no trainable tensors were checked".into()
    })?;
    Ok(worst)
}

fn pet_store_entry(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> ParamId {
    let id = store
        .add(name, t, Group::Pet, Kind::Weight)
        .expect("fresh name");
    store.set_trainable(id, true);
    id
}

/// A weighted sum of all entries, so every output element has its own
/// gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> crate::error::Result<Var> {
    let (r, c) = tape.shape(v);
    let w = Tensor::randn(&[r, c], 1.0, &mut Rng::new(seed));
    let wv = tape.constant(&w)?;
    let p = tape.mul(v, wv)?;
    Ok(tape.sum(p))
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        d: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_ffn: 16,
        vocab: 24,
        max_len: 16,
        visual_dim: 4,
        visual_tokens: 4,
        init_std: 0.3,
        embed_std: 0.5,
        ln_eps: 1e-5,
    }
}

fn tiny_sample(cfg: &BackboneConfig, rng: &mut Rng, text_len: usize, target_len: usize) -> Sample {
    Sample {
        visual: (0..cfg.visual_tokens * cfg.visual_dim)
            .map(|_| rng.normal())
            .collect(),
        text: (0..text_len)
            .map(|_| 3 + rng.below(cfg.vocab - 3))
            .collect(),
        target: (0..target_len)
            .map(|_| 3 + rng.below(cfg.vocab - 3))
            .collect(),
    }
}

fn decomposed_spec(gated: bool) -> DecomposedSpec {
    DecomposedSpec {
        r: 4,
        heads: 2,
        gated,
        s: 1.0,
    }
}

/// A tiny model with every weight (biases and LayerNorm affines included)
/// drawn at random.
fn random_model(mode: VisualMode, gated: bool, seed: u64) -> Model<f64> {
    let mut rng = Rng::new(seed);
    let mut m = Model::<f64>::new(
        &tiny_backbone(),
        mode,
        decomposed_spec(gated),
        InitPolicy::GaussianAll,
        Some(&mut rng),
    )
    .expect("valid tiny model");
    scramble(&mut m.store, &mut rng);
    m
}

fn scramble(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let gain = store.entry(id).kind == Kind::NormGain;
        for v in store.get_mut(id).data_mut() {
            *v = if gain {
                1.0 + 0.2 * rng.normal()
            } else {
                0.3 * rng.normal()
            };
        }
    }
}

fn train_everything(store: &mut ParamStore<f64>) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.set_trainable(id, true);
    }
}

// ------------------------------------------------------------------
// tensor
// ------------------------------------------------------------------

fn tensor_gradcheck_ops() -> Check {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let a = pet_store_entry(&mut store, "a", randn(5, 4, 1.0, &mut rng));
    let b = pet_store_entry(&mut store, "b", randn(4, 4, 1.0, &mut rng));
    let row = pet_store_entry(&mut store, "row", randn(1, 4, 1.0, &mut rng));
    let obj = TapeObjective(move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let (a, b, row) = (s.bind(t, a)?, s.bind(t, b)?, s.bind(t, row)?);
        let x = t.matmul(a, b)?;
        let x = t.mul_row(x, row)?;
        let x = t.normalize_rows(x, 1e-5);
        let q = t.gelu(x);
        let k = t.sigmoid(x);
        let segs = [(0, 2), (2, 3)];
        let att = t.attention(q, k, x, &segs, &segs, 2, true)?;
        let cross = t.attention(att, x, k, &segs, &segs, 2, false)?;
        let pooled = t.group_mean(cross, vec![Some(0), Some(0), None, Some(1), Some(1)], 2)?;
        let back = t.group_expand(pooled, vec![1, 0, 0, 1, 1])?;
        let both = t.concat_cols(&[back, att])?;
        let logits = t.matmul_t(both, both)?;
        t.cross_entropy(logits, &[0, 3, 1, 4, 2])
    });
    check_reports(&grad_check("tape ops", &mut store, &obj, 11).map_err(err)?)
}

// ------------------------------------------------------------------
// granularity
// ------------------------------------------------------------------

fn generator_oracle(level: GranularityLevel) -> Check {
    let mut rng = Rng::new(20 + level as u64);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let n = 1 + rng.below(7);
        let d = 1 + rng.below(9);
        let r = 1 + rng.below(5);
        let s = 0.1 + 2.9 * rng.uniform();
        let mut store = ParamStore::<f64>::new();
        let ctl = GranularityController::new(
            &mut store,
            "g",
            level,
            d,
            d,
            r,
            s,
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .map_err(err)?;
        randomize(&mut store, &ctl.param_ids(), 0.8, &mut rng);
        let x = randn(n, d, 1.0, &mut rng);
        let h = randn(n, d, 1.0, &mut rng);
        let segs = random_segments(n, &mut rng);
        let pool = Pooling::segments(n, &segs);
        let got = ctl.evaluate(&store, &x, &h, &pool).map_err(err)?;
        let w = |name: &str| Mat::param(&store, &format!("g.{name}"));
        let (xm, hm) = (mat(&x), mat(&h));
        let want = match level {
            GranularityLevel::Large => naive::g_large(&xm, &w("g_down"), &w("g_up"), s),
            GranularityLevel::MiddleX => naive::g_middle_x(&xm, &hm, &w("g_down"), s),
            GranularityLevel::MiddleY => naive::g_middle_y(n, &w("g_z"), s),
            GranularityLevel::Small => naive::g_small(&xm, &hm, &w("g_down"), s, &segs),
            GranularityLevel::Identity => return Err("identity has no generator".into()),
        };
        worst = worst.max(rel_err(got.data(), &want.data));
        let g = mat(&got);
        let (lo, hi) = if level == GranularityLevel::MiddleY {
            (s, 2.0 * s)
        } else {
            (0.0, s)
        };
        for (i, &v) in g.data.iter().enumerate() {
            ensure(v > lo && v < hi, || {
                format!("case {case}: entry {i} = {v} outside ({lo}, {hi})")
            })?;
        }
        for i in 0..n {
            for j in 0..d {
                let v = g.at(i, j);
                let same = match level {
                    GranularityLevel::MiddleX => v == g.at(i, 0),
                    GranularityLevel::MiddleY => v == g.at(0, j),
                    GranularityLevel::Small => {
                        let (start, _) = *segs
                            .iter()
                            .find(|(st, len)| i >= *st && i < st + len)
                            .expect("covered");
                        v == g.at(start, 0)
                    }
                    _ => true,
                };
                ensure(same, || {
                    format!("case {case}: constancy broken at ({i}, {j})")
                })?;
            }
        }
    }
    Ok(worst)
}

fn identity_update() -> Check {
    let mut rng = Rng::new(25);
    for _ in 0..CASES {
        let (n, d) = (1 + rng.below(6), 1 + rng.below(8));
        let h = randn(n, d, 2.0, &mut rng);
        let delta = randn(n, d, 2.0, &mut rng);
        let mut t = Tape::<f64>::inference();
        let (hv, dv) = (
            t.constant(&h).map_err(err)?,
            t.constant(&delta).map_err(err)?,
        );
        let ones = t.constant(&Tensor::ones(&[n, d])).map_err(err)?;
        let plain = t.add(hv, dv).map_err(err)?;
        let none = apply_update(&mut t, hv, dv, None).map_err(err)?;
        let unit = apply_update(&mut t, hv, dv, Some(ones)).map_err(err)?;
        let bits = |v: Var| t.value(v).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(
            bits(plain) == bits(none) && bits(plain) == bits(unit),
            || "unit gate is not bit-identical to the ungated update".into(),
        )?;
    }
    Ok(0.0)
}

fn additive_update() -> Check {
    let mut rng = Rng::new(26);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (n, d) = (1 + rng.below(6), 1 + rng.below(8));
        let h = randn(n, d, 1.0, &mut rng);
        let delta = randn(n, d, 1.0, &mut rng);
        let g = randn(n, d, 1.0, &mut rng);
        let mut t = Tape::<f64>::inference();
        let (hv, dv, gv) = (
            t.constant(&h).map_err(err)?,
            t.constant(&delta).map_err(err)?,
            t.constant(&g).map_err(err)?,
        );
        let add = apply_update_add(&mut t, hv, dv, gv).map_err(err)?;
        let gated = apply_update(&mut t, hv, dv, Some(gv)).map_err(err)?;
        let want_add = naive::add(&naive::add(&mat(&h), &mat(&delta)), &mat(&g));
        let want_gated = naive::hadamard(&mat(&g), &naive::add(&mat(&h), &mat(&delta)));
        worst = worst.max(rel_err(t.value(add), &want_add.data));
        worst = worst.max(rel_err(t.value(gated), &want_gated.data));
    }
    Ok(worst)
}

fn generator_param_counts() -> Check {
    for (d, r) in [(4, 2), (64, 8), (768, 96)] {
        for level in GranularityLevel::ALL {
            let mut store = ParamStore::<f32>::new();
            GranularityController::new(
                &mut store,
                "g",
                level,
                d,
                d,
                r,
                1.0,
                InitPolicy::ZeroUp,
                None,
            )
            .map_err(err)?;
            let want = match level {
                GranularityLevel::Large => 2 * d * r,
                GranularityLevel::MiddleX | GranularityLevel::MiddleY => d,
                GranularityLevel::Small => 2 * d,
                GranularityLevel::Identity => 0,
            };
            ensure(
                store.total_count() == want && level.param_count(d, d, r) == want,
                || {
                    format!(
                        "{level} at d={d} r={r}: {} stored, {want} expected",
                        store.total_count()
                    )
                },
            )?;
        }
    }
    Ok(0.0)
}

fn generator_gradcheck() -> Check {
    let mut worst = 0.0f64;
    let (n, d, r) = (3, 4, 2);
    for level in [
        GranularityLevel::Large,
        GranularityLevel::MiddleX,
        GranularityLevel::MiddleY,
        GranularityLevel::Small,
    ] {
        let mut rng = Rng::new(28);
        let mut store = ParamStore::<f64>::new();
        let ctl = GranularityController::new(
            &mut store,
            "g",
            level,
            d,
            d,
            r,
            1.5,
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .map_err(err)?;
        let ids = ctl.param_ids();
        randomize(&mut store, &ids, 0.8, &mut rng);
        for id in ids {
            store.set_trainable(id, true);
        }
        let x = pet_store_entry(&mut store, "x", randn(n, d, 1.0, &mut rng));
        let h = pet_store_entry(&mut store, "h", randn(n, d, 1.0, &mut rng));
        let delta = pet_store_entry(&mut store, "delta", randn(n, d, 1.0, &mut rng));
        let pool = Pooling::segments(n, &[(0, 2), (2, 1)]);
        let obj = TapeObjective(move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (xv, hv, dv) = (s.bind(t, x)?, s.bind(t, h)?, s.bind(t, delta)?);
            let g = ctl.generate(t, s, xv, hv, &pool)?.expect("gated level");
            let out = apply_update(t, hv, dv, Some(g))?;
            weighted_sum(t, out, 5)
        });
        worst = worst.max(check_reports(
            &grad_check(level.as_str(), &mut store, &obj, 28).map_err(err)?,
        )?);
    }
    Ok(worst)
}

// ------------------------------------------------------------------
// modifications
// ------------------------------------------------------------------

fn build_modification(
    variant: HeadVariant,
    d: usize,
    r: usize,
    heads: usize,
    seed: u64,
) -> (ParamStore<f64>, MultiHeadModification) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
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
    .expect("divisible shapes");
    let ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &ids, 0.5, &mut rng);
    (store, m)
}

fn forward_modification(
    store: &ParamStore<f64>,
    m: &MultiHeadModification,
    x: &Tensor<f64>,
) -> Check2 {
    let mut t = Tape::inference();
    let xv = t.constant(x).map_err(err)?;
    let out = m.forward(&mut t, store, xv).map_err(err)?;
    Ok(mat(&t.tensor(out)))
}

type Check2 = std::result::Result<Mat, String>;

fn head_weights(store: &ParamStore<f64>, ids: &[ParamId]) -> Vec<Mat> {
    ids.iter().map(|&id| mat(store.get(id))).collect()
}

fn head_concat_equivalence() -> Check {
    let mut rng = Rng::new(31);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * (1 + rng.below(3));
        let r = heads * (1 + rng.below(3));
        let n = 1 + rng.below(5);
        for variant in [HeadVariant::Down, HeadVariant::Up, HeadVariant::DownUp] {
            let (store, m) = build_modification(variant, d, r, heads, 1000 + case as u64);
            let x = randn(n, d, 1.0, &mut rng);
            let got = forward_modification(&store, &m, &x)?;
            let downs = head_weights(&store, m.down_ids());
            let ups = head_weights(&store, m.up_ids());
            let want = naive::bottleneck(
                &mat(&x),
                &naive::concat_cols(&downs),
                &naive::concat_cols(&ups),
            );
            worst = worst.max(rel_err(&got.data, &want.data));
        }
    }
    Ok(worst)
}

fn pair_witness() -> Check {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(32);
    for heads in [2, 4] {
        let (d, r) = (8, 8);
        let (store, m) =
            build_modification(HeadVariant::DownUpPair, d, r, heads, 32 + heads as u64);
        let x = randn(5, d, 1.0, &mut rng);
        let got = forward_modification(&store, &m, &x)?;
        let downs = head_weights(&store, m.down_ids());
        let ups = head_weights(&store, m.up_ids());
        let paired = naive::paired_heads(&mat(&x), &downs, &ups);
        worst = worst.max(rel_err(&got.data, &paired.data));
        // Dense single-head counterpart: every output head reads the whole
        // hidden state through a tiled copy of its weights.
        let dense_up = {
            let (hr, hc) = (r / heads, d / heads);
            let mut u = Mat::zeros(r, d);
            for (j, up) in ups.iter().enumerate() {
                for block in 0..heads {
                    for a in 0..hr {
                        for b in 0..hc {
                            u.set(block * hr + a, j * hc + b, up.at(a, b));
                        }
                    }
                }
            }
            u
        };
        let dense = naive::bottleneck(&mat(&x), &naive::concat_cols(&downs), &dense_up);
        let gap = rel_err(&got.data, &dense.data);
        ensure(gap > 1e-6, || {
            format!("pair variant with {heads} heads matched its dense form")
        })?;
    }
    Ok(worst)
}

fn modification_param_counts() -> Check {
    for (d, r) in [(8, 8), (64, 16), (768, 96)] {
        let mut prev = usize::MAX;
        for heads in [1, 2, 4, 8] {
            for variant in HeadVariant::ALL {
                let mut store = ParamStore::<f32>::new();
                let m = MultiHeadModification::new(
                    &mut store,
                    "m",
                    variant,
                    d,
                    d,
                    r,
                    heads,
                    InitPolicy::ZeroUp,
                    None,
                )
                .map_err(err)?;
                let want = match variant {
                    HeadVariant::DownUpPair => d * r + r * d / heads,
                    _ => d * r + r * d,
                };
                ensure(
                    store.total_count() == want && m.param_count() == want,
                    || {
                        format!(
                            "{variant} d={d} r={r} h={heads}: {} stored, {want} expected",
                            store.total_count()
                        )
                    },
                )?;
                if variant == HeadVariant::DownUpPair {
                    ensure(heads == 1 || want < prev, || {
                        "pair count does not shrink with heads".into()
                    })?;
                    prev = want;
                }
            }
        }
    }
    Ok(0.0)
}

fn lora_scalar_loop() -> Check {
    let mut rng = Rng::new(34);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let (n, d, r) = (1 + rng.below(5), 1 + rng.below(8), 1 + rng.below(4));
        let mut store = ParamStore::<f64>::new();
        let l = LoraModification::new(
            &mut store,
            "l",
            d,
            d,
            r,
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .map_err(err)?;
        let ids: Vec<ParamId> = store.ids().collect();
        randomize(&mut store, &ids, 0.5, &mut rng);
        let x = randn(n, d, 1.0, &mut rng);
        let w = randn(d, d, 1.0, &mut rng);
        let mut t = Tape::inference();
        let (xv, wv) = (t.constant(&x).map_err(err)?, t.constant(&w).map_err(err)?);
        let out = l.forward(&mut t, &store, xv, wv).map_err(err)?;
        let (a, b) = l.ids();
        let xm = mat(&x);
        let want = naive::add(
            &naive::matmul(&xm, &mat(&w)),
            &naive::matmul(&naive::matmul(&xm, &mat(store.get(a))), &mat(store.get(b))),
        );
        worst = worst.max(rel_err(t.value(out), &want.data));
    }
    Ok(worst)
}

type Builder = Box<dyn Fn(&mut ParamStore<f64>, &mut Rng) -> Modification>;

fn modification_gradcheck() -> Check {
    let mut worst = 0.0f64;
    let (n, d, r) = (3, 4, 4);
    let mut builds: Vec<(String, Builder)> = Vec::new();
    for variant in HeadVariant::ALL {
        builds.push((
            variant.to_string(),
            Box::new(move |s, rng| {
                Modification::MultiHead(
                    MultiHeadModification::new(
                        s,
                        "m",
                        variant,
                        d,
                        d,
                        r,
                        2,
                        InitPolicy::GaussianAll,
                        Some(rng),
                    )
                    .unwrap(),
                )
            }),
        ));
    }
    builds.push((
        "adapter".into(),
        Box::new(move |s, rng| {
            Modification::adapter(s, "m", d, d, r, InitPolicy::GaussianAll, Some(rng)).unwrap()
        }),
    ));
    builds.push((
        "lora".into(),
        Box::new(move |s, rng| {
            Modification::Lora(
                LoraModification::new(s, "m", d, d, 2, InitPolicy::GaussianAll, Some(rng)).unwrap(),
            )
        }),
    ));
    for (name, build) in builds {
        let mut rng = Rng::new(35);
        let mut store = ParamStore::<f64>::new();
        let m = build(&mut store, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        randomize(&mut store, &ids, 0.7, &mut rng);
        train_everything(&mut store);
        let x = pet_store_entry(&mut store, "x", randn(n, d, 1.0, &mut rng));
        let obj = TapeObjective(move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let xv = s.bind(t, x)?;
            let out = m.forward(t, s, xv)?;
            weighted_sum(t, out, 6)
        });
        worst = worst.max(check_reports(
            &grad_check(&name, &mut store, &obj, 35).map_err(err)?,
        )?);
    }
    Ok(worst)
}

// ------------------------------------------------------------------
// backbone
// ------------------------------------------------------------------

fn vanilla_reference() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..6 {
        let model = random_model(VisualMode::Trainable, false, 41 + seed);
        let cfg = model.config().clone();
        let mut rng = Rng::new(seed);
        let (text_len, target_len) = (1 + rng.below(4), 1 + rng.below(5));
        let sample = tiny_sample(&cfg, &mut rng, text_len, target_len);
        let mut t = Tape::inference();
        let out = model.forward(&mut t, &[&sample]).map_err(err)?;
        let want = naive::reference_logits(&cfg, &model.store, &sample);
        worst = worst.max(rel_err(t.value(out.logits), &want.data));
        let loss = naive::cross_entropy(&want, &sample.target);
        worst = worst.max((t.scalar(out.loss) - loss).abs() / loss.abs().max(1.0));
    }
    Ok(worst)
}

fn all_site_specs(
    cfg: &BackboneConfig,
    level: GranularityLevel,
    delta: impl Fn(SiteKind) -> DeltaSpec,
) -> Vec<AttachmentSpec> {
    let mut specs = Vec::new();
    for kind in SiteKind::ALL {
        let layers = if kind.is_encoder() {
            cfg.enc_layers
        } else {
            cfg.dec_layers
        };
        for layer in 0..layers {
            specs.push(AttachmentSpec {
                site: Site::new(kind, layer),
                gate: level,
                gate_r: 2,
                s: 1.0,
                combine: Combine::Gated,
                delta: delta(kind),
            });
        }
    }
    specs
}

type DeltaFor = Box<dyn Fn(SiteKind) -> DeltaSpec>;

fn identity_attachment() -> Check {
    let base = random_model(VisualMode::Trainable, false, 42);
    let cfg = base.config().clone();
    let mut rng = Rng::new(42);
    let samples: Vec<Sample> = (0..3)
        .map(|i| tiny_sample(&cfg, &mut rng, 1 + i, 2 + i))
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let logits = |m: &Model<f64>| -> std::result::Result<Vec<u64>, String> {
        let mut t = Tape::inference();
        let out = m.forward(&mut t, &refs).map_err(err)?;
        Ok(t.value(out.logits).iter().map(|v| v.to_bits()).collect())
    };
    let want = logits(&base)?;
    let deltas: [(&str, DeltaFor); 3] = [
        (
            "multi-head",
            Box::new(|_| DeltaSpec::MultiHead {
                variant: HeadVariant::DownUp,
                r: 4,
                heads: 2,
            }),
        ),
        ("adapter", Box::new(|_| DeltaSpec::Adapter { r: 2 })),
        ("lora", Box::new(|_| DeltaSpec::Lora { r: 2 })),
    ];
    for level in GranularityLevel::ALL {
        for (name, delta) in &deltas {
            let mut m = base.clone();
            m.attach(
                &all_site_specs(&cfg, level, delta),
                InitPolicy::ZeroUp,
                Some(&mut rng),
            )
            .map_err(err)?;
            m.set_force_unit_gate(true);
            ensure(logits(&m)? == want, || {
                format!("{level} gate with {name} delta changed the logits")
            })?;
        }
    }
    Ok(0.0)
}

fn packed_batch() -> Check {
    let model = random_model(VisualMode::Trainable, false, 43);
    let cfg = model.config().clone();
    let mut rng = Rng::new(43);
    let samples: Vec<Sample> = (0..4)
        .map(|i| tiny_sample(&cfg, &mut rng, 1 + i, 1 + (3 * i) % 5))
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let packed = model.loss(&refs).map_err(err)?;
    let tokens: usize = samples.iter().map(|s| s.target.len()).sum();
    let mut weighted = 0.0;
    for s in &samples {
        weighted += model.loss(&[s]).map_err(err)? * s.target.len() as f64;
    }
    let single = weighted / tokens as f64;
    Ok((packed - single).abs() / single.abs().max(1.0))
}

fn site_wiring() -> Check {
    let mut model = random_model(VisualMode::Trainable, false, 44);
    let cfg = model.config().clone();
    let mut rng = Rng::new(44);
    model
        .attach(
            &all_site_specs(&cfg, GranularityLevel::Large, |_| DeltaSpec::Adapter {
                r: 2,
            }),
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .map_err(err)?;
    let sample = tiny_sample(&cfg, &mut rng, 3, 3);
    let mut t = Tape::inference();
    let mut records = Vec::new();
    let enc = model
        .encode(&mut t, &[&sample], &mut records)
        .map_err(err)?;
    model
        .decode(&mut t, &enc, &[sample.decoder_input()], &mut records)
        .map_err(err)?;
    let memory = t.value(enc.out).to_vec();
    ensure(records.len() == 12, || {
        format!("{} sites visited, 12 expected", records.len())
    })?;
    for r in &records {
        if matches!(
            r.site.kind,
            SiteKind::DecCrossAttnKey | SiteKind::DecCrossAttnValue
        ) {
            ensure(t.value(r.x) == memory.as_slice(), || {
                format!("{} does not read the encoder output", r.site)
            })?;
        }
        if r.site.kind.is_sublayer_output() {
            ensure(r.residual.is_some() && r.output.is_some(), || {
                format!("{} has no residual record", r.site)
            })?;
        }
    }
    Ok(0.0)
}

fn projector_gradcheck() -> Check {
    let cfg = tiny_backbone();
    let mut worst = 0.0f64;
    let modes = [
        (VisualMode::Trainable, false),
        (VisualMode::Frozen, false),
        (VisualMode::NoiseInput, false),
        (VisualMode::Decomposed, false),
        (VisualMode::Decomposed, true),
    ];
    for (mode, gated) in modes {
        let mut rng = Rng::new(45);
        let mut store = ParamStore::<f64>::new();
        let proj = Projector::new(
            &mut store,
            mode,
            cfg.visual_dim,
            cfg.d,
            0.5,
            decomposed_spec(gated),
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .map_err(err)?;
        scramble(&mut store, &mut rng);
        train_everything(&mut store);
        let f = pet_store_entry(
            &mut store,
            "features",
            randn(cfg.visual_tokens, cfg.visual_dim, 1.0, &mut rng),
        );
        let obj = TapeObjective(move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let fv = s.bind(t, f)?;
            let out = proj.forward(t, s, fv, false)?;
            weighted_sum(t, out, 7)
        });
        worst = worst.max(check_reports(
            &grad_check(mode.as_str(), &mut store, &obj, 45).map_err(err)?,
        )?);
    }
    let mut store = ParamStore::<f64>::new();
    let absent = Projector::new(
        &mut store,
        VisualMode::Absent,
        cfg.visual_dim,
        cfg.d,
        0.5,
        decomposed_spec(false),
        InitPolicy::GaussianAll,
        None,
    )
    .map_err(err)?;
    let mut t = Tape::<f64>::new();
    let f = t
        .constant(&Tensor::zeros(&[2, cfg.visual_dim]))
        .map_err(err)?;
    ensure(
        absent.forward(&mut t, &store, f, false).is_err() && store.is_empty(),
        || "absent projector accepted features".into(),
    )?;
    Ok(worst)
}

fn model_gradcheck() -> Check {
    let mut worst = 0.0f64;
    let levels = [
        GranularityLevel::Large,
        GranularityLevel::MiddleX,
        GranularityLevel::MiddleY,
        GranularityLevel::Small,
    ];
    for (i, level) in levels.into_iter().enumerate() {
        let mut model = random_model(VisualMode::Trainable, false, 46 + i as u64);
        let cfg = model.config().clone();
        let mut rng = Rng::new(46);
        let variant = HeadVariant::ALL[i];
        let mut specs = all_site_specs(&cfg, level, |kind| match kind {
            SiteKind::EncSelfAttnQuery | SiteKind::DecSelfAttnValue => DeltaSpec::Lora { r: 2 },
            _ => DeltaSpec::MultiHead {
                variant,
                r: 4,
                heads: 2,
            },
        });
        specs[0].combine = Combine::Additive;
        model
            .attach(&specs, InitPolicy::GaussianAll, Some(&mut rng))
            .map_err(err)?;
        scramble(&mut model.store, &mut rng);
        train_everything(&mut model.store);
        let samples: Vec<Sample> = (0..2)
            .map(|k| tiny_sample(&cfg, &mut rng, 2 + k, 2 + k))
            .collect();
        let mut store = model.store.clone();
        // The checker perturbs `store`; each evaluation runs the model
        // structure against whatever weights it is handed.
        let obj = TapeObjective(move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let mut m = model.clone();
            m.store = s.clone();
            let refs: Vec<&Sample> = samples.iter().collect();
            Ok(m.forward(t, &refs)?.loss)
        });
        worst = worst.max(check_reports(
            &grad_check(level.as_str(), &mut store, &obj, 46).map_err(err)?,
        )?);
    }
    Ok(worst)
}

fn freeze_after_training() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.train.precision = Precision::F64;
    cfg.train.steps = 50;
    cfg.tasks.eval_size = 4;
    cfg.tasks.train_probe_size = 4;
    let seed = 47;
    let initial = build_task_models::<f64>(&cfg, seed).map_err(err)?;
    let before = initial[0].model.store.snapshot();
    let (result, trained) = run_seed::<f64>(&cfg, seed, "").map_err(err)?;
    ensure(result.loss_trace.len() == 50, || {
        "training did not take 50 steps".into()
    })?;
    let store = &trained[0].model.store;
    let violations = freeze_audit(&before, store);
    ensure(violations.is_empty(), || {
        format!("frozen tensors changed: {violations:?}")
    })?;
    let moved = store
        .iter()
        .zip(&before)
        .filter(|((_, e), b)| e.tensor.requires_grad() && e.tensor.data() != b.data())
        .count();
    let trainable = store
        .iter()
        .filter(|(_, e)| e.tensor.requires_grad())
        .count();
    ensure(
        moved > 0 && store.iter().any(|(_, e)| !e.tensor.requires_grad()),
        || format!("{moved} of {trainable} trainable tensors moved"),
    )?;
    Ok(0.0)
}

fn checkpoint_round_trip() -> Check {
    let model = random_model(VisualMode::Decomposed, true, 48);
    let bytes = checkpoint::encode(&model.store);
    let entries = checkpoint::decode::<f64>(&bytes).map_err(err)?;
    ensure(entries.len() == model.store.len(), || {
        "entry count changed".into()
    })?;
    for ((_, e), a) in model.store.iter().zip(&entries) {
        let same = e.name == a.name
            && e.tensor.shape() == a.tensor.shape()
            && e.tensor
                .data()
                .iter()
                .zip(a.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("{} did not round-trip", e.name))?;
    }
    ensure(
        checkpoint::decode::<f64>(&bytes[..bytes.len() - 3]).is_err(),
        || "truncated archive accepted".into(),
    )?;
    Ok(0.0)
}

// ------------------------------------------------------------------
// harness
// ------------------------------------------------------------------

fn bart_percentages() -> Check {
    let targets = [
        (GranularityLevel::Large, 4.16),
        (GranularityLevel::Small, 2.98),
        (GranularityLevel::MiddleX, 2.98),
        (GranularityLevel::MiddleY, 2.98),
    ];
    let mut worst = 0.0f64;
    for (level, want) in targets {
        let c = count_params(&ExperimentConfig::bart_base_accounting(Method::Vlpet(
            level,
        )))
        .map_err(err)?;
        worst = worst.max((c.percentage - want).abs());
    }
    Ok(worst)
}

fn accounting_grid() -> Vec<ExperimentConfig> {
    let mut base = ExperimentConfig::default();
    base.backbone.vocab = 40;
    let mut out = Vec::new();
    for method in Method::all() {
        for mode in VisualMode::ALL {
            for (plan, enc_ln, dec_ln) in [(0, true, false), (1, false, true), (0, false, false)] {
                let mut c = base.clone();
                c.method.name = method;
                c.freeze.visual_mode = mode;
                c.freeze.visual_gate = plan == 1;
                c.freeze.encoder_ln = enc_ln;
                c.freeze.decoder_ln = dec_ln;
                if plan == 1 {
                    c.method.decoder_sites = conventional_decoder();
                    c.method.variant = HeadVariant::DownUpPair;
                }
                out.push(c);
            }
        }
    }
    out
}

fn analytic_equals_instantiated() -> Check {
    for cfg in accounting_grid() {
        let a = count_params(&cfg).map_err(err)?;
        let b = instantiated_count(&cfg).map_err(err)?;
        ensure(a == b, || {
            format!(
                "{} / {}: analytic {a:?}, instantiated {b:?}",
                cfg.method.name,
                cfg.freeze.visual_mode.as_str()
            )
        })?;
    }
    Ok(0.0)
}

fn percentage_monotonicity() -> Check {
    for base in [
        ExperimentConfig::default(),
        ExperimentConfig::bart_base_accounting(Method::Frozen),
    ] {
        let pct = |level| {
            let mut c = base.clone();
            c.method.name = Method::Vlpet(level);
            count_params(&c).map(|p: ParamCount| (p.percentage, p.trainable))
        };
        let (large, _) = pct(GranularityLevel::Large).map_err(err)?;
        let (mx, nx) = pct(GranularityLevel::MiddleX).map_err(err)?;
        let (my, ny) = pct(GranularityLevel::MiddleY).map_err(err)?;
        let (_, ns) = pct(GranularityLevel::Small).map_err(err)?;
        let sites = 2 * base.backbone.enc_layers;
        ensure(
            large > mx && nx == ny && ns - nx == sites * base.backbone.d,
            || format!("large {large}, middleX {mx}, middleY {my}"),
        )?;
    }
    Ok(0.0)
}

fn config_round_trip() -> Check {
    for cfg in accounting_grid().into_iter().step_by(7) {
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).map_err(err)?;
        ensure(back == cfg && back.hash() == cfg.hash(), || {
            format!("{} did not round-trip", cfg.method.name)
        })?;
    }
    let bad = ExperimentConfig::from_toml_str("[method]\nnmae = \"lora\"");
    ensure(bad.is_err(), || "unknown key accepted".into())?;
    Ok(0.0)
}

fn shared_module() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.train.precision = Precision::F64;
    let multi = build_task_models::<f64>(&cfg, 55).map_err(err)?;
    ensure(
        multi.len() == 1 && multi[0].tasks.len() == TaskKind::ALL.len(),
        || "multi-task mode must share one model across all tasks".into(),
    )?;
    cfg.train.mode = TaskMode::Single;
    let single = build_task_models::<f64>(&cfg, 55).map_err(err)?;
    ensure(single.len() == TaskKind::ALL.len(), || {
        "single-task mode needs one model per task".into()
    })?;
    let pet: Vec<ParamId> = single[0]
        .model
        .store
        .iter()
        .filter(|(_, e)| e.group == Group::Pet)
        .map(|(id, _)| id)
        .collect();
    for i in 0..single.len() {
        for j in i + 1..single.len() {
            for &id in &pet {
                let (a, b) = (
                    single[i].model.store.get(id).data(),
                    single[j].model.store.get(id).data(),
                );
                ensure(a.as_ptr() != b.as_ptr(), || {
                    "single-task models share PET storage".into()
                })?;
            }
        }
    }
    Ok(0.0)
}

fn task_prompts() -> Check {
    let cfg = ExperimentConfig::default();
    let suite = TaskSuite::new(&cfg.tasks, &cfg.backbone).map_err(err)?;
    let mut rng = Rng::new(56);
    for task in TaskKind::ALL {
        for _ in 0..50 {
            let s = suite.sample(task, &mut rng);
            ensure(s.text.first() == Some(&task.prompt()), || {
                format!("{task} example lacks its prompt")
            })?;
            ensure(s.target.last() == Some(&crate::backbone::EOS), || {
                format!("{task} target lacks EOS")
            })?;
            ensure(s.target.len() <= suite.max_target(task), || {
                format!("{task} target too long")
            })?;
        }
    }
    Ok(0.0)
}

fn grid_structure() -> Check {
    let base = ExperimentConfig::default();
    let want = [
        (Axis::Sites, 7),
        (Axis::Cross, 3),
        (Axis::Ln, 4),
        (Axis::Heads, 4),
        (Axis::Level, 5),
    ];
    for (axis, n) in want {
        let cells = grid_cells(&base, axis);
        ensure(cells.len() == n, || {
            format!("{axis}: {} cells, {n} expected", cells.len())
        })?;
        for c in &cells {
            ensure(c.config.seeds == base.seeds, || {
                format!("{axis}/{} does not share seeds", c.label)
            })?;
            c.config.validate().map_err(err)?;
        }
    }
    Ok(0.0)
}

fn fake_result(method: Method, seed: u64) -> RunResult {
    RunResult {
        name: "fake".into(),
        cell: String::new(),
        method: method.to_string(),
        mode: TaskMode::Multi,
        seed,
        config_hash: format!("{seed:016x}"),
        scores: TaskKind::ALL
            .iter()
            .map(|&task| TaskScore {
                task,
                exact_match: 0.25 * seed as f64,
                final_loss: 1.0 / (1.0 + seed as f64),
            })
            .collect(),
        loss_trace: vec![3.0, 2.0, 1.5],
        params: ParamCount::new(10, 1000),
        wall_time_s: 0.125,
        status: RunStatus::Ok,
    }
}

fn emit_determinism() -> Check {
    let results: Vec<RunResult> = [Method::Vlpet(GranularityLevel::Large), Method::Frozen]
        .into_iter()
        .flat_map(|m| (0..3).map(move |s| fake_result(m, s)))
        .collect();
    let configs = vec![ExperimentConfig::default()];
    let dir = std::env::temp_dir().join(format!("pet-emit-check-{}", std::process::id()));
    let read = |sub: &str| -> std::result::Result<(Vec<u8>, Vec<u8>), String> {
        let d = dir.join(sub);
        emit_results(&results, &configs, &d).map_err(err)?;
        Ok((
            std::fs::read(d.join("results.csv")).map_err(err)?,
            std::fs::read(d.join("results.json")).map_err(err)?,
        ))
    };
    let first = read("a")?;
    let second = read("b")?;
    let _ = std::fs::remove_dir_all(&dir);
    ensure(first == second, || "re-emitting changed the files".into())?;
    let rows = String::from_utf8_lossy(&first.0).lines().count() - 1;
    ensure(rows == 6, || format!("{rows} CSV rows, 6 expected"))?;
    Ok(0.0)
}

fn run_determinism() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.train.precision = Precision::F64;
    cfg.train.steps = 12;
    cfg.tasks.eval_size = 6;
    cfg.tasks.train_probe_size = 6;
    let (a, _) = run_seed::<f64>(&cfg, 59, "").map_err(err)?;
    let (b, _) = run_seed::<f64>(&cfg, 59, "").map_err(err)?;
    ensure(a.same_outcome(&b), || {
        "equal seeds gave different results".into()
    })?;
    let (c, _) = run_seed::<f64>(&cfg, 60, "").map_err(err)?;
    ensure(c.loss_trace != a.loss_trace, || {
        "different seeds gave equal loss traces".into()
    })?;
    Ok(0.0)
}

// ------------------------------------------------------------------
// negative controls
// ------------------------------------------------------------------

fn gradcheck_negative_control() -> Check {
    let mut rng = Rng::new(61);
    let mut store = ParamStore::<f64>::new();
    let ctl = GranularityController::new(
        &mut store,
        "g",
        GranularityLevel::Large,
        4,
        4,
        2,
        1.0,
        InitPolicy::GaussianAll,
        Some(&mut rng),
    )
    .map_err(err)?;
    let ids = ctl.param_ids();
    randomize(&mut store, &ids, 0.8, &mut rng);
    for id in ids {
        store.set_trainable(id, true);
    }
    let x = pet_store_entry(&mut store, "x", randn(3, 4, 1.0, &mut rng));
    let obj = TapeObjective(move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let xv = s.bind(t, x)?;
        let g = ctl.gen_large(t, s, xv)?;
        weighted_sum(t, g, 8)
    });
    let reports =
        grad_check("corrupted large gate", &mut store, &Corrupted(obj, 2.0), 61).map_err(err)?;
    ensure(reports.iter().all(|r| !r.passed), || {
        "an off-by-2 gradient passed the check".into()
    })?;
    Ok(0.0)
}

fn freeze_negative_control() -> Check {
    let model = random_model(VisualMode::Trainable, false, 62);
    let mut store = model.store.clone();
    FreezePolicy::default().apply(&mut store);
    let before = store.snapshot();
    ensure(freeze_audit(&before, &store).is_empty(), || {
        "clean store flagged".into()
    })?;
    let victim = store
        .ids()
        .find(|&id| !store.is_trainable(id))
        .ok_or("no frozen tensor to perturb")?;
    let v = &mut store.get_mut(victim).data_mut()[0];
    *v = f64::from_bits(v.to_bits() ^ 1);
    let caught = freeze_audit(&before, &store);
    ensure(caught.len() == 1, || {
        format!("one-ulp change in a frozen tensor went unnoticed: {caught:?}")
    })?;
    Ok(0.0)
}
