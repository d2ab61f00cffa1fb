use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(AutodiffError::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::row(vec![1.0, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store);
            let v = g.param(w).unwrap();
            let s = g.sum(v).unwrap();
            g.backward(s).unwrap()
        };
        store.accumulate(&grads);
        adam.step(&mut store);
        let v = store.value(w).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-2.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::row(vec![3.0, -4.0])).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &store,
        )
        .unwrap();
        for _ in 0..2000 {
            store.zero_grad();
            let grads = {
                let mut g = Graph::with_params(&store);
                let v = g.param(w).unwrap();
                let sq = g.mul(v, v).unwrap();
                let s = g.sum(sq).unwrap();
                g.backward(s).unwrap()
            };
            store.accumulate(&grads);
            adam.step(&mut store);
        }
        assert!(store.value(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn rejects_non_positive_rate() {
        let store = ParamStore::new();
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(cfg, &store).is_err());
    }
}
