//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tuner::store::ParamStore;

/// Optimizer hyperparameters. Decay is applied to the weights directly
/// (`θ ← θ − lr·wd·θ`), separate from the adaptive step, and only to entries
/// whose name marks them as weight matrices.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One optimizer step over the trainable entries. `step` starts at 1 and
/// feeds the bias correction. Frozen entries are never touched.
pub fn adamw_step(
    store: &mut ParamStore,
    lr: f64,
    weight_decay: f64,
    cfg: AdamW,
    step: u64,
) -> Result<()> {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for entry in store.entries_mut() {
        if !entry.trainable {
            continue;
        }
        let n = entry.values.numel();
        let grad = entry.grad.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "trainable entry `{}` has no gradient; run backward first",
                entry.name
            ))
        })?;
        debug_assert_eq!(grad.len(), n);
        let m = entry.adam_m.get_or_insert_with(|| vec![0.0; n]);
        let v = entry.adam_v.get_or_insert_with(|| vec![0.0; n]);
        let decay = if entry.decay { weight_decay } else { 0.0 };
        let values = entry.values.data_mut();
        for i in 0..n {
            let g = grad[i];
            values[i] -= lr * decay * values[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
