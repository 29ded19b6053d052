//! AdamW with per-group learning rates and selective weight decay.

use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    /// Learning rate of the generator group.
    pub lr_base: f64,
    /// Learning rate of the encoder and projection groups.
    pub lr_other: f64,
    pub weight_decay: f64,
    /// Decay every parameter rather than bias-like ones only.
    pub decay_all: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_base: 5e-3,
            lr_other: 1e-3,
            weight_decay: 5e-6,
            decay_all: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Generator => self.lr_base,
            ParamGroup::Encoder | ParamGroup::Projection => self.lr_other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    pub steps: u64,
}

/// First and second moments per parameter, created on first update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub moments: Vec<Option<Moments>>,
}

impl AdamWState {
    pub fn new(n_params: usize) -> Self {
        AdamWState { moments: vec![None; n_params] }
    }
}

/// One update. Parameters whose gradient is `None` are left untouched,
/// decay included; this is how frozen groups are skipped.
pub fn step_optimizer(store: &mut ParamStore, grads: &[Option<Matrix>], state: &mut AdamWState, cfg: &AdamWConfig) {
    assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    for (i, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let p = store.get_mut(crate::params::ParamId(i));
        let (r, c) = p.value.shape();
        let mo = state.moments[i].get_or_insert_with(|| Moments {
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            steps: 0,
        });
        mo.steps += 1;
        let t = mo.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.lr(p.group);
        let wd = if p.is_bias || cfg.decay_all { cfg.weight_decay } else { 0.0 };
        let values = p.value.data_mut();
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for j in 0..values.len() {
            let gj = grad.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            values[j] *= 1.0 - lr * wd;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            values[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
