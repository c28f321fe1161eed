//! Central-difference gradient checking.

use serde::Serialize;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Elements probed per tensor; smaller tensors are checked in full.
pub const MAX_SAMPLES: usize = 64;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub param: String,
    pub max_rel_err: f64,
    pub step: f64,
    pub precision: &'static str,
    /// Flat index of the worst element.
    pub worst: usize,
    pub checked: usize,
    pub passed: bool,
}

/// A scalar function of the stored parameters with analytic gradients.
pub trait Objective {
    fn value(&self, store: &ParamStore<f64>) -> Result<f64>;
    /// Gradient of every trainable parameter, indexed like the store.
    fn gradients(&self, store: &ParamStore<f64>) -> Result<Vec<Option<Tensor<f64>>>>;
}

/// An objective given by a closure that builds the loss on a tape.
pub struct TapeObjective<F>(pub F);

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    fn value(&self, store: &ParamStore<f64>) -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = (self.0)(&mut tape, store)?;
        Ok(tape.scalar(loss))
    }

    fn gradients(&self, store: &ParamStore<f64>) -> Result<Vec<Option<Tensor<f64>>>> {
        let mut tape = Tape::new();
        let loss = (self.0)(&mut tape, store)?;
        tape.backward(loss)?;
        let mut scratch = store.clone();
        scratch.zero_grads();
        scratch.absorb_grads(&tape);
        Ok(scratch
            .iter()
            .map(|(_, e)| {
                e.tensor.grad().map(|g| {
                    Tensor::new(e.tensor.shape(), g.to_vec())
                        .expect("gradient has its tensor's shape")
                })
            })
            .collect())
    }
}

/// Test double that reports analytic gradients multiplied by `factor`.
pub struct Corrupted<O>(pub O, pub f64);

impl<O: Objective> Objective for Corrupted<O> {
    fn value(&self, store: &ParamStore<f64>) -> Result<f64> {
        self.0.value(store)
    }

    fn gradients(&self, store: &ParamStore<f64>) -> Result<Vec<Option<Tensor<f64>>>> {
        Ok(self
            .0
            .gradients(store)?
            .into_iter()
            .map(|g| {
                g.map(|t| {
                    Tensor::new(t.shape(), t.data().iter().map(|v| v * self.1).collect())
                        .expect("same shape")
                })
            })
            .collect())
    }
}

fn sample_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= MAX_SAMPLES {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..MAX_SAMPLES).map(|_| rng.below(n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Compares analytic and central-difference gradients for every trainable
/// tensor in `store`. Values are restored afterwards.
pub fn grad_check(
    op: &str,
    store: &mut ParamStore<f64>,
    objective: &dyn Objective,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let analytic = objective.gradients(store)?;
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let grad = analytic[id.index()]
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut worst = (0.0f64, 0usize);
        let mut finite = true;
        let picks = sample_indices(n, &mut rng);
        for &i in &picks {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let up = objective.value(store)?;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let down = objective.value(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grad[i];
            if !(numeric.is_finite() && a.is_finite()) {
                finite = false;
                worst = (f64::INFINITY, i);
                break;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        reports.push(GradCheckReport {
            op: op.to_string(),
            param: store.name(id).to_string(),
            max_rel_err: worst.0,
            step: STEP,
            precision: "f64",
            worst: worst.1,
            checked: picks.len(),
            passed: finite && worst.0 < TOLERANCE,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, Kind};

    #[allow(clippy::type_complexity)]
    fn quadratic() -> (
        ParamStore<f64>,
        TapeObjective<impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>,
    ) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let w = store
            .add(
                "w",
                Tensor::randn(&[3, 2], 1.0, &mut rng),
                Group::Pet,
                Kind::Weight,
            )
            .unwrap();
        store.set_trainable(w, true);
        let obj = TapeObjective(move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = s.bind(tape, w)?;
            let sq = tape.mul(v, v)?;
            let sg = tape.sigmoid(sq);
            Ok(tape.sum(sg))
        });
        (store, obj)
    }

    #[test]
    fn correct_gradients_pass() {
        let (mut store, obj) = quadratic();
        let reports = grad_check("quadratic", &mut store, &obj, 0).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].passed, "{:?}", reports[0]);
    }

    #[test]
    fn doubled_gradients_fail() {
        let (mut store, obj) = quadratic();
        let reports = grad_check("quadratic", &mut store, &Corrupted(obj, 2.0), 0).unwrap();
        assert!(!reports[0].passed);
        assert!(reports[0].max_rel_err > 0.4);
    }
}
