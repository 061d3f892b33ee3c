use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, super::super::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w)).unwrap();
        (store, id)
    }

    fn grads_of(store: &ParamStore, id: super::super::ParamId, g: f64) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(store);
        grads.accumulate(id, &[g]);
        grads
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        for _ in 0..5 {
            let g = grads_of(&store, id, 0.0);
            adam.step(&mut store, &g);
        }
        assert_eq!(store.get(id).item(), 1.5);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0, -0.02] {
            let (mut store, id) = scalar_store(0.0);
            let cfg = AdamConfig {
                lr: 0.01,
                eps: 1e-16,
                ..AdamConfig::default()
            };
            let mut adam = Adam::new(cfg, &store).unwrap();
            let grads = grads_of(&store, id, g);
            adam.step(&mut store, &grads);
            assert!((store.get(id).item() + 0.01 * f64::signum(g)).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut store, id) = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store).unwrap();
        for _ in 0..200 {
            let w = store.get(id).item();
            let g = grads_of(&store, id, 2.0 * (w - 3.0));
            adam.step(&mut store, &g);
        }
        assert!((store.get(id).item() - 3.0).abs() < 0.05);
    }

    #[test]
    fn rejects_negative_lr() {
        let (store, _) = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: -1e-3,
            ..AdamConfig::default()
        };
        assert!(matches!(Adam::new(cfg, &store), Err(Error::Config(_))));
    }
}
