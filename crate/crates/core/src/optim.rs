//! Adaptive-moment optimizer over a network's parameter list.

use crate::autograd::Tensor;
use crate::networks::NetworkState;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(state: &NetworkState, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = state
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.raw_dim()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, state: &mut NetworkState, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match parameters");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in state
            .parameters_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build, NetworkSpec};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut state = build(NetworkSpec::patchgan(1, 1, 1, 0)).unwrap();
        let before = state.clone();
        let grads: Vec<Tensor> = state
            .parameters()
            .iter()
            .map(|p| p.value.mapv(|_| 3.0))
            .collect();
        let mut opt = Adam::new(&state, 0.01, 0.5, 0.999);
        opt.step(&mut state, &grads);
        for (a, b) in state.parameters().iter().zip(before.parameters()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }
}
