use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold; non-positive disables clipping.
    pub clip_norm: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.25,
            warmup_steps: 100_000,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub warmup_steps: u64,
}

/// Adam with decoupled weight decay, global-norm clipping and linear warmup.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |store: &ParamStore<T>| -> Vec<Vec<T>> {
            store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect()
        };
        Self {
            state: OptimizerState {
                m: zeros(store),
                v: zeros(store),
                step: 0,
                warmup_steps: config.warmup_steps,
            },
            config,
        }
    }

    /// Learning rate applied at optimizer step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * step as f64 / w as f64
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> f64 {
        let norm = global_grad_norm(store);
        let clip = self.config.clip_norm;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };

        self.state.step += 1;
        let t = self.state.step as i32;
        let lr = self.lr_at(self.state.step);
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (lr_t, eps, decay) = (
            T::from_f64_lossy(lr),
            T::from_f64_lossy(c.eps),
            T::from_f64_lossy(lr * c.weight_decay),
        );
        let scale = T::from_f64_lossy(scale);
        let one = T::one();

        for (i, p) in store.iter_mut().enumerate() {
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else { continue };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (((w, &g), mi), vi) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - decay * *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
            p.tensor.grad = Some(vec![T::zero(); grad.len()]);
        }
        norm
    }
}

/// L2 norm over the gradients of every trainable parameter.
pub fn global_grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|p| p.tensor.requires_grad)
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&g| {
            let g = g.to_f64().unwrap();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}
