//! AdamW with decoupled weight decay, and the piecewise learning-rate
//! schedule: hold, linear decay, low-rate fine-tune.

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::net::{ModelConfig, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate plan. Defaults hold 1e-5 for 50 epochs, decay linearly to
/// 1e-7 at epoch 100, then fine-tune at 1e-7 for 20 more.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warm_hold_epochs: f64,
    pub decay_end_epoch: f64,
    pub finetune_epochs: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_max: 1e-5,
            lr_min: 1e-7,
            warm_hold_epochs: 50.0,
            decay_end_epoch: 100.0,
            finetune_epochs: 20.0,
            weight_decay: 1e-4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::config("need 0 < lr_min < lr_max"));
        }
        if !(0.0 <= self.warm_hold_epochs
            && self.warm_hold_epochs < self.decay_end_epoch
            && self.finetune_epochs >= 0.0)
        {
            return Err(Error::config("schedule epochs out of order"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("negative weight decay"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> f64 {
        self.decay_end_epoch + self.finetune_epochs
    }

    /// Same shape, rates multiplied by `factor`. The default rates assume a
    /// warm start from pretrained weights; training a toy from scratch in a
    /// few hundred steps needs proportionally larger ones.
    pub fn scaled(&self, factor: f64) -> Self {
        ScheduleConfig {
            lr_max: self.lr_max * factor,
            lr_min: self.lr_min * factor,
            ..*self
        }
    }
}

/// Learning rate at a (possibly fractional) epoch: `lr_max` during the
/// hold, linear from `lr_max` to `lr_min` across the decay window, `lr_min`
/// afterwards.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if !epoch.is_finite() || epoch < 0.0 || epoch > cfg.total_epochs() {
        return Err(Error::config(format!(
            "epoch {} outside [0, {}]",
            epoch,
            cfg.total_epochs()
        )));
    }
    Ok(if epoch < cfg.warm_hold_epochs {
        cfg.lr_max
    } else if epoch <= cfg.decay_end_epoch {
        let f = (epoch - cfg.warm_hold_epochs) / (cfg.decay_end_epoch - cfg.warm_hold_epochs);
        // Convex form: exact at both endpoints, no round-off drift.
        cfg.lr_max * (1.0 - f) + cfg.lr_min * f
    } else {
        cfg.lr_min
    })
}

/// First and second moment estimates, one slot per parameter, stored in the
/// same canonical tensor order as [`ModelParams::named_tensors`].
pub struct AdamwState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamwState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        let zeros = ModelParams::<T>::zeros(config);
        let m: Vec<Vec<T>> = zeros
            .named_tensors()
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect();
        AdamwState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Weight decay is decoupled: parameters shrink by
/// `lr * wd` *before* the Adam step, so decay strength never depends on the
/// gradient scale.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamwState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient in optimizer step"));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(format!("bad learning rate {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::from_f64(1.0 - BETA1.powi(t));
    let bc2 = T::from_f64(1.0 - BETA2.powi(t));
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let one = T::one();
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(ADAM_EPS);
    let decay = T::from_f64(1.0 - lr * weight_decay);

    let grad_tensors = grads.named_tensors();
    let mut param_tensors = params.named_tensors_mut();
    assert_eq!(
        grad_tensors.len(),
        param_tensors.len(),
        "tensor sets differ"
    );
    for (ti, pt) in param_tensors.iter_mut().enumerate() {
        let g = grad_tensors[ti].data;
        assert_eq!(g.len(), pt.data.len(), "tensor {} length", pt.name);
        let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
        for j in 0..g.len() {
            let p = pt.data[j] * decay;
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pt.data[j] = p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
