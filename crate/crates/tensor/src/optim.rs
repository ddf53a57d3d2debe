//! AdamW: Adam with weight decay applied directly to the weights rather than
//! folded into the gradient.

use crate::graph::Graph;
use crate::param::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0 }
    }

    /// Applies one update using the gradients recorded on `graph` for every
    /// parameter bound into it. Parameters that received no gradient are left
    /// untouched.
    pub fn step<E: Real>(&mut self, store: &mut ParamStore<E>, graph: &Graph<E>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = E::from_f64_lossy(c.lr);
        let decay = E::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let b1 = E::from_f64_lossy(c.beta1);
        let b2 = E::from_f64_lossy(c.beta2);
        let one_m_b1 = E::from_f64_lossy(1.0 - c.beta1);
        let one_m_b2 = E::from_f64_lossy(1.0 - c.beta2);
        let bc1 = E::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = E::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = E::from_f64_lossy(c.eps);

        let mut bound: Vec<_> = graph.bound_params().collect();
        bound.sort_by_key(|(id, _)| *id);
        for (id, var) in bound {
            let Some(grad) = graph.grad(var) else {
                continue;
            };
            let p = store.get_mut(id);
            let (value, m, v) = (p.value.data_mut(), &mut p.first_moment, &mut p.second_moment);
            for i in 0..value.len() {
                let g = grad[i];
                value[i] = value[i] * decay;
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_step(init: &[f32], grad_scale: f32, config: AdamWConfig) -> Vec<f32> {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(vec![init.len()], init.to_vec()).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let c = g.constant(Tensor::full(&[init.len()], grad_scale));
        let y = g.mul(w, c).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let mut opt = AdamW::new(config);
        opt.step(&mut store, &g);
        store.value(id).data().to_vec()
    }

    #[test]
    fn zero_gradient_is_pure_decoupled_decay() {
        let config = AdamWConfig {
            weight_decay: 0.25,
            ..Default::default()
        };
        let init = [1.5f32, -2.0, 0.125];
        let out = one_step(&init, 0.0, config);
        let factor = (1.0 - config.lr * config.weight_decay) as f32;
        for (o, i) in out.iter().zip(init) {
            assert_eq!(*o, i * factor);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let config = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let init = [0.5f32, -0.5];
        for g in [3.0f32, -0.01] {
            let out = one_step(&init, g, config);
            for (o, i) in out.iter().zip(init) {
                let delta = (o - i).abs();
                assert!((delta - 1e-3).abs() < 1e-6, "delta {delta}");
                assert_eq!((o - i).signum(), -g.signum());
            }
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let config = AdamWConfig::default();
        assert_eq!(one_step(&[0.3, 0.7], 0.2, config), one_step(&[0.3, 0.7], 0.2, config));
    }
}
