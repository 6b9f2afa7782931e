use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated lazily per
/// trainable parameter, indexed by parameter position in the store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.m.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.v.get(index).and_then(Option::as_ref)
    }
}

/// One Adam update over every trainable parameter of `store`.
///
/// Accumulated gradients are divided by `batch_size` first (mean reduction),
/// and all gradients are cleared afterwards. Frozen parameters are skipped.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Contract("adam_step with an empty batch".into()));
    }
    if let Some(p) = store
        .iter()
        .find(|(_, p)| p.trainable && p.grad.is_none())
        .map(|(_, p)| p.name.clone())
    {
        return Err(Error::Contract(format!("trainable parameter {p} has no gradient")));
    }
    let n = store.len();
    state.m.resize(n, None);
    state.v.resize(n, None);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let inv_batch = 1.0 / batch_size as f64;
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let grad = p.grad.take();
        if !p.trainable {
            continue;
        }
        let grad = grad.expect("checked above");
        let shape = p.tensor.shape().to_vec();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (j, (w, g)) in p.tensor.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g * inv_batch;
            md[j] = b1 * md[j] + (1.0 - b1) * g;
            vd[j] = b2 * vd[j] + (1.0 - b2) * g * g;
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Multi-step decay: `base_lr * gamma^(number of milestones <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub base_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            milestones: vec![1, 5, 10, 15, 20, 25, 30, 40],
            gamma: 0.9,
            base_lr: 0.01,
        }
    }
}

impl LrSchedule {
    pub fn new(milestones: Vec<usize>, gamma: f64, base_lr: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if !(gamma > 0.0) || !(base_lr > 0.0) {
            return Err(Error::Config("gamma and base_lr must be positive".into()));
        }
        Ok(LrSchedule {
            milestones,
            gamma,
            base_lr,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let crossed = self.milestones.iter().filter(|m| **m <= epoch).count();
        self.base_lr * self.gamma.powi(crossed as i32)
    }
}
