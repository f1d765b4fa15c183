use super::params::ParamStore;

/// Hyper-parameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
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

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr);
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient buffer per parameter");
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Learning rate at `step` of `total` under cosine annealing from `base` down
/// to `floor`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = scalar_store(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, &[vec![1.0]]);
        let delta = store.iter().next().unwrap().value.data()[0];
        // m_hat = v_hat = 1, so delta = -lr / (1 + eps)
        assert_eq!(delta, -1e-3 / (1.0 + 1e-8));
        assert!((delta - -9.99999995e-4).abs() < 1e-11);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = scalar_store(0.75);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..5 {
            opt.step(&mut store, &[vec![0.0]]);
        }
        assert_eq!(store.iter().next().unwrap().value.data()[0], 0.75);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut store = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, &[vec![0.0]]);
        assert_eq!(store.iter().next().unwrap().value.data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 0.0, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 0.0, 50, 100) - 5e-4).abs() < 1e-15);
        assert!((cosine_lr(1e-3, 1e-6, 100, 100) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 1e-6, 250, 100) - 1e-6).abs() < 1e-18);
    }
}
