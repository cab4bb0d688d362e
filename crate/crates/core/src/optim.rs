//! SGD with momentum and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamKind, ParamSet};

/// `base * decay^floor(epoch / every)`, epochs counted from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: f64,
}

impl StepSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let steps = (epoch as f64 / self.every).floor() as usize;
        // Repeated multiplication keeps the familiar decimal values exact
        // where powi would round differently.
        (0..steps).fold(self.base, |lr, _| lr * self.decay)
    }
}

/// Momentum SGD: `v = momentum * v + lr * (g + wd * theta)`, `theta -= v`.
/// Weight decay applies to [`ParamKind::Weight`] tensors only. Compatibility
/// entries are projected back onto `[0, inf)` after each step: with a negative
/// entry the CRF energy in the loss has no lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<S: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(params: &ParamSet<S>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![S::zero(); p.tensor.len()]).collect(),
        }
    }

    /// Applies one update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet<S>, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidState(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        let (m, lr) = (S::lit(self.momentum), S::lit(lr));
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let wd = if p.kind == ParamKind::Weight {
                S::lit(self.weight_decay)
            } else {
                S::zero()
            };
            let grad = p.tensor.grad().map(<[S]>::to_vec);
            let Some(grad) = grad else {
                return Err(Error::InvalidState(format!("parameter {} has no gradient", p.name)));
            };
            for ((theta, vel), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = m * *vel + lr * (g + wd * *theta);
                *theta -= *vel;
                if p.kind == ParamKind::Compatibility && *theta < S::zero() {
                    *theta = S::zero();
                }
            }
        }
        Ok(())
    }
}
