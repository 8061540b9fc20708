//! Adaptive-moment optimizer with decoupled weight decay.

use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments are kept per parameter and created lazily; a fresh optimizer is
/// built for every task.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in `params`.
    /// Frozen or untrainable parameters and masked-out elements are untouched.
    pub fn step(&mut self, params: &mut ParamStore) {
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        for id in params.ids() {
            let p = params.get_mut(id);
            if !p.receives_grad() {
                continue;
            }
            let i = id.index();
            let n = p.value.numel();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let mask = p.update_mask.as_deref();
            let value = p.value.data_mut();
            for k in 0..n {
                if mask.is_some_and(|mk| !mk[k]) {
                    continue;
                }
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                value[k] -= lr * weight_decay * value[k];
                value[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scale all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in params.ids().collect::<Vec<_>>() {
            params
                .get_mut(id)
                .grad
                .data_mut()
                .iter_mut()
                .for_each(|g| *g *= s);
        }
    }
    norm
}
