//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-5, weight_decay: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |id: ParamId| vec![T::zero(); store.get(id).len()];
        Self { cfg, step: 0, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect() }
    }

    /// One update at learning rate `lr` (the schedule is the caller's).
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, decay) = (T::c(lr), T::c(c.eps), T::c(lr * c.weight_decay));
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] - decay * p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scalar_reference() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.constant("w", &[2], 0.5);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &store);
        let (mut p, mut m, mut v) = ([0.5f64, 0.5], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=5 {
            let g = [p[0] * 2.0, -1.0 + t as f64];
            opt.update(&mut store, &[(id, g.to_vec())], cfg.lr).unwrap();
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 0.1 * 0.01 * p[i];
                p[i] -= 0.1 * mh / (vh.sqrt() + cfg.eps);
            }
            for i in 0..2 {
                assert!((store.get(id).data()[i] - p[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.constant("w", &[3], 1.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, eps: 1e-12, ..AdamWConfig::default() }, &store);
        opt.update(&mut store, &[(id, vec![3.0, -0.01, 0.0])], 0.01).unwrap();
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] - 1.01).abs() < 1e-9 && p[2] == 1.0);
    }

    #[test]
    fn buffers_are_left_alone_and_nan_is_rejected() {
        let mut store = ParamStore::<f64>::new(0);
        let b = store.buffer("running", &[1], 2.0);
        let w = store.constant("w", &[1], 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &[(b, vec![1.0])], 0.1).unwrap();
        assert_eq!(store.get(b).data()[0], 2.0);
        assert!(matches!(opt.update(&mut store, &[(w, vec![f64::NAN])], 0.1), Err(Error::NonFinite(_))));
    }
}
