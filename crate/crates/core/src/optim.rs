//! AdamW with a linear warmup / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_BASE_LR: f64 = 5e-5;
pub const DEFAULT_WARMUP_STEPS: u64 = 500;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: DEFAULT_BASE_LR,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
    /// Number of updates this parameter has received; drives bias correction.
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub total_steps: u64,
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, total_steps: u64) -> Self {
        Self {
            config,
            total_steps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step, &self.config, self.total_steps)
    }
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, config: &OptimizerConfig, total_steps: u64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < config.warmup_steps {
        return config.base_lr * step as f64 / config.warmup_steps as f64;
    }
    config.base_lr * (total_steps - step) as f64 / (total_steps - config.warmup_steps) as f64
}

/// One decoupled-weight-decay update of the trainable parameters in `ids`.
///
/// Frozen parameters in `ids` are skipped; every trainable one must carry a
/// fresh gradient. The learning rate is taken at the current step counter,
/// which is then incremented.
pub fn adamw_step(store: &mut ParamStore, ids: &[ParamId], state: &mut OptimizerState) -> Result<()> {
    let lr = state.lr();
    let c = state.config;
    for &id in ids {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        if !p.has_grad {
            return Err(Error::Contract(format!("trainable parameter `{}` has no gradient", p.name)));
        }
    }
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    for &id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let m = state.moments[id.0].get_or_insert_with(|| Moments {
            first: Tensor::zeros(p.value.shape()),
            second: Tensor::zeros(p.value.shape()),
            updates: 0,
        });
        m.updates += 1;
        let bc1 = 1.0 - c.beta1.powi(m.updates as i32);
        let bc2 = 1.0 - c.beta2.powi(m.updates as i32);
        let g = p.grad.data();
        let first = m.first.data_mut();
        let second = m.second.data_mut();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            first[i] = c.beta1 * first[i] + (1.0 - c.beta1) * g[i];
            second[i] = c.beta2 * second[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = first[i] / bc1;
            let vhat = second[i] / bc2;
            value[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[i]);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamGroup;

    fn store_with(value: f64, grad: f64, trainable: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", ParamGroup::Spal, Tensor::scalar(value)).unwrap();
        s.get_mut(id).trainable = trainable;
        s.get_mut(id).grad = Tensor::scalar(grad);
        s.get_mut(id).has_grad = true;
        (s, id)
    }

    #[test]
    fn schedule_endpoints() {
        let c = OptimizerConfig::default();
        assert_eq!(lr_at(0, &c, 10_000), 0.0);
        assert_eq!(lr_at(500, &c, 10_000), 5e-5);
        assert_eq!(lr_at(10_000, &c, 10_000), 0.0);
        assert_eq!(lr_at(20_000, &c, 10_000), 0.0);
        assert!((lr_at(250, &c, 10_000) - 2.5e-5).abs() < 1e-20);
        assert!((lr_at(5250, &c, 10_000) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn frozen_param_is_untouched() {
        let (mut s, id) = store_with(0.3, 1.0, false);
        let before = s.value(id).clone();
        let mut st = OptimizerState::new(OptimizerConfig::default(), 100);
        st.step = 10;
        adamw_step(&mut s, &[id], &mut st).unwrap();
        assert!(s.value(id).bit_eq(&before));
        assert_eq!(st.step, 11);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut s, id) = store_with(0.3, 0.0, true);
        let config = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(config, 100);
        st.step = 50;
        adamw_step(&mut s, &[id], &mut st).unwrap();
        assert_eq!(s.value(id).data()[0], 0.3);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let (mut s, id) = store_with(0.3, 0.0, true);
        s.get_mut(id).has_grad = false;
        let mut st = OptimizerState::new(OptimizerConfig::default(), 100);
        assert!(matches!(adamw_step(&mut s, &[id], &mut st), Err(Error::Contract(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn single_step_matches_scalar_oracle() {
        // Scalar AdamW, written out independently.
        fn oracle(p: f64, g: f64, lr: f64) -> f64 {
            let (b1, b2, eps, wd) = (0.9_f64, 0.999_f64, 1e-8, 0.01);
            let m = (1.0 - b1) * g;
            let v = (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1);
            let vhat = v / (1.0 - b2);
            p - lr * (mhat / (vhat.sqrt() + eps) + wd * p)
        }
        let (mut s, id) = store_with(0.7, -0.25, true);
        let mut st = OptimizerState::new(OptimizerConfig::default(), 1000);
        st.step = 500;
        adamw_step(&mut s, &[id], &mut st).unwrap();
        let expected = oracle(0.7, -0.25, 5e-5);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-12);
    }
}
