//! Adam-family optimiser over a [`ParamStore`].

use crate::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers are kept in f64 regardless of the parameter type.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let decay = if p.no_decay { 0.0 } else { c.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.value.data.iter_mut().zip(&p.grad).enumerate() {
                let g = g.as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut wf = w.as_f64();
                wf -= c.lr * decay * wf;
                wf -= c.lr * mhat / (vhat.sqrt() + c.eps);
                *w = T::lit(wf);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let k = T::lit(max_norm / norm);
        for p in store.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new([2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        for _ in 0..2000 {
            store.zero_grad();
            let g: Vec<f64> = store.value(id).data.iter().map(|w| 2.0 * (w - 1.0)).collect();
            store.add_grad(id, &g);
            opt.step(&mut store);
        }
        for w in &store.value(id).data {
            assert!((w - 1.0).abs() < 1e-3, "{w}");
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros([2]));
        store.add_grad(id, &[3.0, 4.0]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        assert!((store.grad_norm() - 1.0).abs() < 1e-6);
    }
}
