use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: `λ·w` is added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Adam with per-parameter moment buffers and step counts. Masked entries
/// never move and their moments stay zero.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let state = store
            .ids()
            .map(|id| {
                let n = store.get(id).numel();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    steps: 0,
                }
            })
            .collect();
        Ok(Adam { cfg, state })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        self.cfg.lr = lr;
        Ok(())
    }

    /// Apply one update to each of `ids` that holds a gradient, then clear it.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        for &id in ids {
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.grad().map(|g| g.to_vec()) else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter #{}", id.index())));
            }
            let st = &mut self.state[id.index()];
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            let mask = p.mask().data().to_vec();
            p.update_values(|vals| {
                for i in 0..vals.len() {
                    if mask[i] == 0.0 {
                        st.m[i] = 0.0;
                        st.v[i] = 0.0;
                        continue;
                    }
                    let g = grad[i] + weight_decay * vals[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let mhat = st.m[i] / bc1;
                    let vhat = st.v[i] / bc2;
                    vals[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }

    /// Zero both moments of `indices` in parameter `id`.
    pub fn reset_entries(&mut self, id: ParamId, indices: &[usize]) {
        let st = &mut self.state[id.index()];
        for &i in indices {
            st.m[i] = 0.0;
            st.v[i] = 0.0;
        }
    }

    pub fn reset_param(&mut self, id: ParamId) {
        let st = &mut self.state[id.index()];
        st.m.fill(0.0);
        st.v.fill(0.0);
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let st = &self.state[id.index()];
        (&st.m, &st.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param::{MaskedParam, ParamKind};
    use crate::autodiff::tensor::Tensor;

    fn store_with(values: Vec<f64>, mask: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.insert(
            "w",
            ParamKind::DenseWeight,
            1,
            MaskedParam::new(Tensor::new(vec![n], values).unwrap(), Tensor::new(vec![n], mask).unwrap()).unwrap(),
        );
        (s, id)
    }

    #[test]
    fn zero_grad_leaves_params() {
        let (mut s, id) = store_with(vec![0.3, -0.2], vec![1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        s.get_mut(id).set_grad(vec![0.0, 0.0]).unwrap();
        adam.step(&mut s, &[id]).unwrap();
        assert_eq!(s.get(id).value().data(), &[0.3, -0.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(vec![1.0], vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        s.get_mut(id).set_grad(vec![1.0]).unwrap();
        adam.step(&mut s, &[id]).unwrap();
        // m̂ = 1, v̂ = 1, step = lr / (1 + eps)
        assert!((s.get(id).value().data()[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn masked_weight_stays_zero() {
        let (mut s, id) = store_with(vec![1.0, 1.0], vec![0.0, 1.0]);
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.1, ..Default::default() }, &s).unwrap();
        s.get_mut(id).set_grad(vec![5.0, 5.0]).unwrap();
        adam.step(&mut s, &[id]).unwrap();
        assert_eq!(s.get(id).value().data()[0], 0.0);
        assert_eq!(adam.moments(id).0[0], 0.0);
        assert_eq!(adam.moments(id).1[0], 0.0);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let (s, _) = store_with(vec![1.0], vec![1.0]);
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &s).is_err());
    }

    #[test]
    fn weight_decay_is_coupled() {
        // g = 0, λ = 1: effective gradient is w itself, so w shrinks by ~lr.
        let (mut s, id) = store_with(vec![2.0], vec![1.0]);
        let mut adam = Adam::new(AdamConfig { weight_decay: 1.0, ..Default::default() }, &s).unwrap();
        s.get_mut(id).set_grad(vec![0.0]).unwrap();
        adam.step(&mut s, &[id]).unwrap();
        assert!((s.get(id).value().data()[0] - 1.999).abs() < 1e-9);
    }
}
