//! AdamW with decoupled weight decay and the warmup + cosine learning
//! rate schedule.

use crate::model::checkpoint::OptimizerState;
use crate::model::ModelParams;

/// Learning rate at `step`: linear ramp from 0 to `base_lr` over
/// `warmup_steps`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step outside schedule");
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW: Adam moments on the gradient, weight decay applied directly to
/// the parameters (decoupled). The loss weight lambda is exempt from
/// decay; decaying a loss-mixing coefficient toward zero would change
/// the objective rather than regularize it.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn from_state(state: OptimizerState, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: state.m,
            v: state.v,
            t: state.step,
        }
    }

    pub fn state(&self, epoch: u64) -> OptimizerState {
        OptimizerState {
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.t,
            epoch,
        }
    }

    /// One update with learning rate `lr`. When `update_lambda` is false
    /// the loss weight (the last parameter) is left untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        update_lambda: bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let n_params = params.params().len();
        let lambda_idx = n_params - 1;
        let mut p = params.params_mut();
        let g = grads.params();
        let mut m = self.m.params_mut();
        let mut v = self.v.params_mut();
        for idx in 0..n_params {
            let is_lambda = idx == lambda_idx;
            if is_lambda && !update_lambda {
                continue;
            }
            let pd = p[idx].data_mut();
            let gd = g[idx].data();
            let md = m[idx].data_mut();
            let vd = v[idx].data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                if !is_lambda {
                    pd[i] -= lr * self.weight_decay * pd[i];
                }
            }
        }
    }
}
