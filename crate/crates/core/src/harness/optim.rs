//! Gradient clipping and AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};

/// Rescale to `max_norm` when the L2 norm exceeds it; direction preserved.
pub fn clip_grad_norm(g: &[f64], max_norm: f64) -> Vec<f64> {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= max_norm {
        return g.to_vec();
    }
    let scale = max_norm / norm;
    g.iter().map(|v| v * scale).collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Step count used for bias correction; incremented before each update.
    pub t: u64,
}

impl AdamWState {
    pub fn new(dim: usize) -> Self {
        AdamWState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// The update an AdamW step would apply, before touching any state. The
/// direction is the full applied update per unit learning rate, decay
/// included: theta_next = theta + lr * direction.
#[derive(Debug, Clone)]
pub struct AdamWPreview {
    pub direction: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub fn adamw_preview(
    theta: &[f64],
    g: &[f64],
    state: &AdamWState,
    hyper: &AdamWHyper,
) -> Result<AdamWPreview> {
    if theta.len() != g.len() || state.m.len() != g.len() {
        return Err(Error::Dimension(format!(
            "adamw: parameter/gradient/state dimensions disagree ({}, {}, {})",
            theta.len(),
            g.len(),
            state.m.len()
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient contains NaN/Inf".into()));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let mut m = Vec::with_capacity(g.len());
    let mut v = Vec::with_capacity(g.len());
    let mut direction = Vec::with_capacity(g.len());
    for k in 0..g.len() {
        let mk = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g[k];
        let vk = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
        let mhat = mk / bc1;
        let vhat = vk / bc2;
        direction.push(-(hyper.weight_decay * theta[k] + mhat / (vhat.sqrt() + hyper.eps)));
        m.push(mk);
        v.push(vk);
    }
    Ok(AdamWPreview { direction, m, v, t })
}

/// Commit a previewed step: theta += lr * direction, state <- preview.
pub fn adamw_commit(
    theta: &mut ParameterStore,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
    preview: AdamWPreview,
) {
    for (p, d) in theta.flat_mut().iter_mut().zip(&preview.direction) {
        *p += hyper.lr * d;
    }
    state.m = preview.m;
    state.v = preview.v;
    state.t = preview.t;
}

/// One AdamW step. Non-finite gradients leave parameters and state
/// untouched and surface as an error for the caller to flag.
pub fn adamw_step(
    theta: &mut ParameterStore,
    g: &[f64],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<()> {
    let preview = adamw_preview(theta.flat(), g, state, hyper)?;
    adamw_commit(theta, state, hyper, preview);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_of(values: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.push("w", values).unwrap();
        s
    }

    #[test]
    fn clip_passes_small_and_rescales_large() {
        let small = clip_grad_norm(&[0.3, 0.4], 1.0);
        assert_eq!(small, vec![0.3, 0.4]);

        let clipped = clip_grad_norm(&[3.0, 4.0], 1.0);
        assert!((clipped[0] - 0.6).abs() <= 1e-15);
        assert!((clipped[1] - 0.8).abs() <= 1e-15);
        let norm = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-12);
    }

    #[test]
    fn clip_preserves_direction() {
        let g = vec![1.0, -2.0, 0.5, 7.0];
        let c = clip_grad_norm(&g, 1.0);
        let dot: f64 = c.iter().zip(&g).map(|(a, b)| a * b).sum();
        let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dot - nc * ng).abs() <= 1e-12);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut theta = store_of(vec![1.0, -2.0]);
        let mut state = AdamWState::new(2);
        let mut hyper = AdamWHyper::with_lr(0.1);
        hyper.weight_decay = 0.0;
        adamw_step(&mut theta, &[0.0, 0.0], &mut state, &hyper).unwrap();
        assert_eq!(theta.flat(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut theta = store_of(vec![1.0, -2.0]);
        let mut state = AdamWState::new(2);
        let hyper = AdamWHyper::with_lr(0.1);
        adamw_step(&mut theta, &[0.0, 0.0], &mut state, &hyper).unwrap();
        let factor = 1.0 - 0.1 * 1e-2;
        assert!((theta.flat()[0] - factor).abs() <= 1e-15);
        assert!((theta.flat()[1] + 2.0 * factor).abs() <= 1e-15);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut theta = store_of(vec![0.0]);
        let mut state = AdamWState::new(1);
        let mut hyper = AdamWHyper::with_lr(0.01);
        hyper.weight_decay = 0.0;
        adamw_step(&mut theta, &[1.0], &mut state, &hyper).unwrap();
        // mhat = g, vhat = g^2, so the step is -lr * g/(|g| + eps) = -lr.
        assert!((theta.flat()[0] + 0.01).abs() <= 1e-9);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_state_change() {
        let mut theta = store_of(vec![1.0]);
        let mut state = AdamWState::new(1);
        let hyper = AdamWHyper::with_lr(0.1);
        let err = adamw_step(&mut theta, &[f64::NAN], &mut state, &hyper);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(theta.flat(), &[1.0]);
        assert_eq!(state.t, 0);
    }
}
