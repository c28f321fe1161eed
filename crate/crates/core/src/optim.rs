//! AdamW with decoupled weight decay and a warmup-then-linear-decay schedule.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Multiplier on the base learning rate at `step` (0-based) of `total`:
/// linear warmup over the first `warmup_ratio` of steps, then linear decay
/// to zero.
pub fn lr_factor(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let total = total.max(1) as f64;
    let warm = (warmup_ratio * total).round();
    let t = step as f64 + 1.0;
    if warm > 0.0 && t <= warm {
        t / warm
    } else {
        ((total - t) / (total - warm).max(1.0)).max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter that has a gradient, then clears
    /// all gradients. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_scale: f64) -> f64 {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.is_trainable(id) && store.get(id).grad().is_some())
            .collect();
        let norm = ids
            .iter()
            .flat_map(|&id| store.get(id).grad().unwrap_or(&[]).iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c && norm.is_finite() => c / norm,
            _ => 1.0,
        };
        let lr = self.cfg.lr * lr_scale;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let bc1 = T::of(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = T::of(self.cfg.eps);
        let decay = T::of(1.0 - lr * self.cfg.weight_decay);
        let lr = T::of(lr);
        let clip = T::of(clip);
        let one = T::one();
        for id in ids {
            let k = id.index();
            let t = store.get_mut(id);
            let g: Vec<T> = t.grad().expect("filtered above").to_vec();
            let m = self.m[k].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v[k].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let w = t.data_mut();
            for i in 0..g.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] = w[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grads();
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, Kind};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_warms_up_then_decays() {
        let f: Vec<f64> = (0..10).map(|s| lr_factor(s, 10, 0.2)).collect();
        assert_eq!(f[0], 0.5);
        assert_eq!(f[1], 1.0);
        assert!(f.windows(2).skip(1).all(|w| w[1] <= w[0]));
        assert_eq!(f[9], 0.0);
    }

    #[test]
    fn frozen_and_gradless_params_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store
            .add("a", Tensor::ones(&[2]), Group::Pet, Kind::Weight)
            .unwrap();
        let b = store
            .add("b", Tensor::ones(&[2]), Group::Backbone, Kind::Weight)
            .unwrap();
        let c = store
            .add("c", Tensor::ones(&[2]), Group::Pet, Kind::Weight)
            .unwrap();
        store.set_trainable(a, true);
        store.set_trainable(c, true);
        store.get_mut(a).accumulate_grad(&[1.0, -1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 1.0);
        assert!(store.get(a).data()[0] < 1.0);
        assert!(store.get(a).data()[1] > 1.0);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        assert_eq!(store.get(c).data(), &[1.0, 1.0]);
        assert!(store.get(a).grad().is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let a = store
            .add("a", Tensor::zeros(&[1]), Group::Pet, Kind::Weight)
            .unwrap();
        store.set_trainable(a, true);
        store.get_mut(a).accumulate_grad(&[0.3]);
        let mut opt = AdamW::new(AdamWConfig {
            clip_norm: None,
            ..AdamWConfig::default()
        });
        opt.step(&mut store, 1.0);
        assert!((store.get(a).data()[0] + 1e-3).abs() < 1e-9);
    }
}
