use serde::{Deserialize, Serialize};

use super::{ModelParams, Params, BLOCK_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    /// 1e-3 at this scale; deep pretrained backbones are usually run near 1e-6.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: ModelParams,
    pub v: ModelParams,
    /// Number of updates applied so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            m: Params::zeros(params.config),
            v: Params::zeros(params.config),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(w: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    if grads.config != w.config || state.m.config != w.config {
        return Err(Error::DimMismatch {
            what: "optimizer parameters",
            expected: vec![w.num_params()],
            actual: vec![grads.num_params()],
        });
    }
    for (name, block) in BLOCK_NAMES.iter().zip(grads.blocks()) {
        if block.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let blocks = w
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut());
    for (((wb, gb), mb), vb) in blocks {
        for i in 0..wb.len() {
            let g = gb[i] as f64;
            let m = beta1 * mb[i] as f64 + (1.0 - beta1) * g;
            let v = beta2 * vb[i] as f64 + (1.0 - beta2) * g * g;
            mb[i] = m as f32;
            vb[i] = v as f32;
            let step = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            wb[i] = (wb[i] as f64 - step) as f32;
        }
    }
    w.generation += 1;
    Ok(())
}
