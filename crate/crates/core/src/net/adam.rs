//! Adam optimizer with bias-corrected moment estimates.

use super::model::SiameseNet;
use super::tensor::Real;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients of every trainable
    /// parameter. Gradients are left in place.
    pub fn step<T: Real>(&mut self, net: &mut SiameseNet<T>) {
        let mut params = net.params_mut();
        params.retain(|(_, p)| p.trainable);
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (_, p)) in params.into_iter().enumerate() {
            p.grad_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *w = T::from_f64(w.to_f64() - update);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut net = SiameseNet::<f32>::build(&ModelConfig::tiny()).unwrap();
        let before: Vec<_> = net.params().iter().map(|(_, p)| p.value.clone()).collect();
        net.zero_grad();
        let mut opt = Adam::new(1e-3);
        opt.step(&mut net);
        opt.step(&mut net);
        for ((_, p), b) in net.params().iter().zip(before) {
            assert_eq!(p.value, b);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = SiameseNet::<f64>::build(&ModelConfig::tiny()).unwrap();
        let w0 = net.params().last().unwrap().1.value.data()[0];
        for (name, p) in net.params_mut() {
            p.zero_grad();
            if name == "head.bias" {
                p.grad[0] = 0.3;
            }
        }
        Adam::new(1e-2).step(&mut net);
        let w1 = net.params().last().unwrap().1.value.data()[0];
        // bias-corrected first step is lr * sign(g)
        assert!((w0 - w1 - 1e-2).abs() < 1e-8);
    }
}
