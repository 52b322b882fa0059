//! Adam with bias correction, linear warmup then linear decay, and global
//! gradient-norm clipping.

use crate::autodiff::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn zeros_like(params: &[&Tensor<R>]) -> Self {
        let z: Vec<Tensor<R>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: z.clone(), v: z }
    }

    /// One update of parameter `i` with gradient `g` at 1-based step `t`.
    pub fn update(&mut self, i: usize, param: &mut Tensor<R>, g: &[R], lr: f64, t: u64, cfg: &AdamConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for (k, p) in param.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
            m[k] = R::from_f64(mk);
            v[k] = R::from_f64(vk);
            let step = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
            *p = R::from_f64(p.as_f64() - step);
        }
    }
}

/// Learning rate for 0-based `step`: linear warmup to `peak` over `warmup`
/// steps, then linear decay towards zero at `total`.
pub fn learning_rate(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let remaining = total.saturating_sub(step) as f64;
    peak * (remaining / (total - warmup) as f64).max(0.0)
}

pub fn global_norm<R: Real>(grads: &[Vec<R>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales in place so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut [Vec<R>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = R::from_f64(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= scale);
    }
    norm
}
