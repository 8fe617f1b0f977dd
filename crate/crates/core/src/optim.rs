//! Learning-rate schedule, global-norm clipping, SGD and Adam.

use crate::config::TrainConfig;
use crate::model::{GradRef, Gradients, ModelParams};
use crate::{Error, Result};

/// `lr0` through `decay_start_epoch`, then divided by `decay_factor` once per
/// further epoch. `epoch` is 1-based.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    if epoch <= config.decay_start_epoch {
        config.lr0
    } else {
        config.lr0 / config.decay_factor.powi((epoch - config.decay_start_epoch) as i32)
    }
}

/// Rescales `grads` so the global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// `p ← p − lr·g`; embedding tables are touched only on rows with gradient.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        match g {
            GradRef::Dense(g) => p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g),
            GradRef::Sparse(rows) => {
                let w = rows.width();
                for (id, row) in rows.iter() {
                    let start = id as usize * w;
                    p[start..start + w]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(p, g)| *p -= lr * g);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn from_config(config: &TrainConfig) -> Self {
        AdamHyper {
            lr: config.lr0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of a slice. `step` is the 1-based count
/// including this update.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hp: &AdamHyper,
    step: u64,
) {
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m).zip(v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Dense Adam over every parameter; rows without gradient see `g = 0`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, hp: &AdamHyper) {
    state.step += 1;
    let step = state.step;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        match g {
            GradRef::Dense(g) => adam_update(p, g, m, v, hp, step),
            GradRef::Sparse(rows) => {
                let w = rows.width();
                let zero = vec![0.0; w];
                for (r, ((pr, mr), vr)) in p
                    .chunks_mut(w)
                    .zip(m.chunks_mut(w))
                    .zip(v.chunks_mut(w))
                    .enumerate()
                {
                    let g = rows.row(r as u32).unwrap_or(&zero);
                    adam_update(pr, g, mr, vr, hp, step);
                }
            }
        }
    }
}
