//! AdamW with decoupled weight decay and global-norm clipping.

use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in `store`. Decay applies
    /// to every parameter, gains and biases included.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = std::sync::Arc::make_mut(&mut p.value).data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                value[j] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * value[j]);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Init;

    fn scalar_store(value: f64, init: Init, shape: &[usize]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", shape, init).unwrap();
        s.value_mut(id).data_mut().fill(value);
        s
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut s = scalar_store(0.7, Init::fan_in(2), &[2, 2]);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, 0.1);
        assert!(s.iter().next().unwrap().value.data().iter().all(|&x| x == 0.7));
    }

    #[test]
    fn degenerate_moments_match_closed_form() {
        let mut s = scalar_store(2.0, Init::fan_in(1), &[1, 1]);
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.1 };
        let mut opt = AdamW::new(&s, cfg);
        let mut theta = 2.0f64;
        for _ in 0..5 {
            s.iter_mut().next().unwrap().grad.data_mut()[0] = 1.0;
            opt.step(&mut s, 0.01);
            theta -= 0.01 * (1.0 + 0.1 * theta);
            assert_eq!(s.iter().next().unwrap().value.data()[0], theta);
        }
    }

    #[test]
    fn decay_shrinks_magnitudes() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[3, 2], Init::fan_in(3)).unwrap();
        s.initialize(4);
        let before = s.value(id).clone();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.01);
        for (a, b) in s.value(id).data().iter().zip(before.data()) {
            assert!(a.abs() < b.abs());
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = scalar_store(0.0, Init::Zeros, &[4]);
        s.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut s, 2.0), grad_norm(&s));
    }
}
