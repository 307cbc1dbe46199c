//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        let n = params.num_params();
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one Adam update to `params` in place.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if !grads.matches(params) {
            return Err(NnError::Shape("gradients do not match parameters".into()));
        }
        if self.first_moment.len() != params.num_params() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} parameters, network has {}",
                self.first_moment.len(),
                params.num_params()
            )));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let grad_slices: Vec<&[f64]> = grads.slices().collect();
        let (m, v) = (&mut self.first_moment, &mut self.second_moment);
        let mut offset = 0;
        let mut tensor = 0;
        params.for_each_param_slice_mut(|p| {
            let g = grad_slices[tensor];
            for (k, (pk, gk)) in p.iter_mut().zip(g).enumerate() {
                let i = offset + k;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gk;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gk * gk;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                *pk -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            offset += p.len();
            tensor += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{HiddenActivation, Layer, Matrix, OutputActivation};

    fn scalar_net(x: f64) -> Mlp {
        Mlp::new(
            vec![Layer {
                weight: Matrix::new(1, 1, vec![x]).unwrap(),
                bias: vec![0.0],
            }],
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )
        .unwrap()
    }

    fn grads_for(net: &Mlp, w: f64, b: f64) -> Gradients {
        let mut g = Gradients::zeros_like(net);
        g.layers[0].weight.as_mut_slice()[0] = w;
        g.layers[0].bias[0] = b;
        g
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let mut net = scalar_net(0.5);
        let mut adam = AdamState::new(&net, AdamConfig::with_learning_rate(0.01));
        let g = grads_for(&net, 1.0, -1.0);
        adam.step(&mut net, &g).unwrap();
        assert!((net.flat_params()[0] - (0.5 - 0.01)).abs() < 1e-6);
        assert!((net.flat_params()[1] - 0.01).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut net = scalar_net(0.5);
        let before = net.flat_params();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let g = Gradients::zeros_like(&net);
        adam.step(&mut net, &g).unwrap();
        assert_eq!(net.flat_params(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn quadratic_descent_decreases_monotonically() {
        // f(x) = x², gradient 2x
        let mut net = scalar_net(1.0);
        let mut adam = AdamState::new(&net, AdamConfig::with_learning_rate(0.1));
        let mut prev = 1.0;
        for _ in 0..5 {
            let x = net.flat_params()[0];
            let g = grads_for(&net, 2.0 * x, 0.0);
            adam.step(&mut net, &g).unwrap();
            let now = net.flat_params()[0];
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut net = scalar_net(1.0);
        let other = Mlp::new(
            vec![Layer {
                weight: Matrix::zeros(2, 1),
                bias: vec![0.0; 2],
            }],
            HiddenActivation::Relu,
            OutputActivation::Identity,
        )
        .unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(adam.step(&mut net, &Gradients::zeros_like(&other)).is_err());
    }
}
