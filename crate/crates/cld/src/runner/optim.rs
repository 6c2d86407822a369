//! SGD with momentum and decoupled-from-biases weight decay, plus the
//! learning-rate schedules.

use crate::encoder::{EncoderParams, ParamGrads};
use crate::error::{CldError, Result};

use super::config::{OptimConfig, Schedule};

/// Momentum buffers, one per parameter tensor in declaration order.
#[derive(Debug, Clone)]
pub struct OptState {
    buffers: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &EncoderParams) -> Self {
        let buffers = params
            .clone()
            .tensors_mut()
            .into_iter()
            .map(|(_, _, t)| vec![0.0; t.len()])
            .collect();
        OptState { buffers }
    }
}

/// buf <- momentum * buf + grad + weight_decay * param (weights only),
/// param <- param - lr_t * buf.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    state: &mut OptState,
    opt: &OptimConfig,
    lr_t: f64,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let param_tensors = params.tensors_mut();
    assert_eq!(grad_tensors.len(), param_tensors.len());
    assert_eq!(state.buffers.len(), param_tensors.len());
    for (((name, is_bias, param), (gname, _, grad)), buf) in param_tensors
        .into_iter()
        .zip(&grad_tensors)
        .zip(&mut state.buffers)
    {
        debug_assert_eq!(&name, gname);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CldError::NonFinite {
                name: format!("gradient of {name}"),
            });
        }
        let decay = if is_bias { 0.0 } else { opt.weight_decay };
        for ((p, &g), b) in param.iter_mut().zip(grad.iter()).zip(buf.iter_mut()) {
            *b = opt.momentum * *b + g + decay * *p;
            *p -= lr_t * *b;
        }
    }
    Ok(())
}

/// Learning rate for a given step. Cosine anneals over steps from lr to 0;
/// the step schedule multiplies by `factor` after each milestone epoch.
pub fn lr_at(opt: &OptimConfig, step: usize, total_steps: usize, epoch: usize) -> f64 {
    match &opt.schedule {
        Schedule::Constant => opt.lr,
        Schedule::Cosine => {
            let t = step as f64 / total_steps.max(1) as f64;
            opt.lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            opt.lr * factor.powi(passed as i32)
        }
    }
}
