use crate::diffcore::{GradBuffer, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments for every parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update with decoupled weight decay. Parameters outside
/// `trainable` are left untouched; trainable ones without a gradient are
/// updated as if it were zero.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &GradBuffer,
    state: &mut OptimizerState,
    trainable: &[bool],
    lr: f64,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        if !trainable[i] {
            continue;
        }
        let g = grads.get(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
        }
    }
}

/// Linear warmup from `lr / warmup` to `lr`, constant afterwards.
pub fn warmup_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 { lr } else { lr * ((step + 1) as f64 / warmup as f64).min(1.0) }
}
