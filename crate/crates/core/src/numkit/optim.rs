use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Multiply the learning rate by `factor` every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub factor: f64,
    pub period: usize,
}

/// Adam moments, step counter and learning-rate schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: Option<StepDecay>,
    epoch: usize,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: None,
            epoch: 0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_decay(mut self, factor: f64, period: usize) -> Self {
        self.decay = Some(StepDecay { factor, period });
        self
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate in effect at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay {
            Some(StepDecay { factor, period }) if period > 0 => {
                self.lr * factor.powi((epoch / period) as i32)
            }
            _ => self.lr,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr_at(self.epoch)
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(missing) = params
            .iter_mut_with_grad()
            .find(|(_, _, g)| g.is_none())
            .map(|(n, _, _)| n.to_string())
        {
            return Err(Error::MissingGradient(missing));
        }
        self.step += 1;
        let lr = self.effective_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, value, grad) in params.iter_mut_with_grad() {
            let grad = grad.expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn adam_step(params: &mut ParamStore, opt: &mut OptimizerState) -> Result<()> {
    opt.step(params)
}
