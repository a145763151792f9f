//! Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moments: Vec<Tensor<f32>>,
    pub second_moments: Vec<Tensor<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first_moments: zeros.clone(),
            second_moments: zeros,
            step: 0,
        }
    }

    /// Applies one bias-corrected Adam update. `grads` is indexed like the
    /// store.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.config;
        if c.learning_rate == 0.0 {
            return;
        }
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads[i].data();
            let m = self.first_moments[i].data_mut();
            let v = self.second_moments[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                p[j] -= (c.learning_rate * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let mut opt = OptimizerState::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &store,
        );
        let g = vec![Tensor::new(vec![1, 2], vec![3.0, -0.5]).unwrap()];
        opt.step(&mut store, &g);
        let x = store.get(store.find("x").unwrap()).data().to_vec();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let before = store.clone();
        let mut opt = OptimizerState::new(
            AdamConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[Tensor::ones(&[1, 2])]);
        assert!(store.bit_eq(&before));
    }
}
