//! Adam with bias correction.

use crate::error::{NnError, Result};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every trainable parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|p| {
                if p.requires_grad {
                    vec![0.0; p.value.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second_moment[index]
    }
}

/// Applies one Adam update to every trainable parameter in `store`.
///
/// Every trainable parameter must hold a gradient; nothing is modified when
/// one is missing.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(NnError::State(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.requires_grad && p.grad.is_none()) {
        return Err(NnError::State(format!(
            "parameter `{}` has no gradient",
            p.name
        )));
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
