//! Reverse-mode differentiation over the primitive set used by every
//! mechanism, plus Hessian-vector products.
//!
//! Gradients run the tape with plain f64. The exact Hessian-vector product
//! reruns the identical forward-and-backward program in dual-number
//! arithmetic with the direction seeded as the tangent, which differentiates
//! the gradient itself; no second tape is needed. The finite-difference
//! estimator is the independent cross-check.

mod params;
mod scalar;
mod tape;

pub use params::{Binder, ParameterStore};
pub use scalar::{gelu, gelu_derivative, sigmoid, softplus, Dual, Real};
pub use tape::{rope_angle, NodeId, Tape, LAYER_NORM_EPS};

use crate::error::{Error, Result};

/// A scalar loss defined over a parameter store, expressible on a tape for
/// any scalar type. Implementors build the same graph for f64 and Dual.
pub trait Objective {
    fn loss<S: Real>(&self, tape: &mut Tape<S>, binder: &mut Binder<'_, S>) -> Result<NodeId>;
}

/// Forward evaluation only.
pub fn loss_value<O: Objective>(obj: &O, theta: &ParameterStore) -> Result<f64> {
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(theta, None);
    let out = obj.loss(&mut tape, &mut binder)?;
    Ok(tape.scalar_value(out))
}

/// Reverse-mode gradient. A non-finite loss or gradient is reported as an
/// explicit error rather than silently propagated.
pub fn grad<O: Objective>(obj: &O, theta: &ParameterStore) -> Result<(f64, Vec<f64>)> {
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(theta, None);
    let out = obj.loss(&mut tape, &mut binder)?;
    let loss = tape.scalar_value(out);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let g = tape.backward(out, theta.dim());
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient contains NaN/Inf".into()));
    }
    Ok((loss, g))
}

/// Central finite-difference Hessian-vector product
/// [grad(theta + eps v) - grad(theta - eps v)] / (2 eps).
pub fn hvp_fd<O: Objective>(
    obj: &O,
    theta: &ParameterStore,
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    if v.len() != theta.dim() {
        return Err(Error::Dimension(format!(
            "direction length {} does not match parameter dimension {}",
            v.len(),
            theta.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("direction contains NaN/Inf".into()));
    }
    let mut plus = theta.clone();
    let mut minus = theta.clone();
    for (k, &vk) in v.iter().enumerate() {
        plus.flat_mut()[k] += eps * vk;
        minus.flat_mut()[k] -= eps * vk;
    }
    let (_, gp) = grad(obj, &plus)?;
    let (_, gm) = grad(obj, &minus)?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect())
}

/// Exact Hessian-vector product by running the forward and reverse passes in
/// dual arithmetic with `v` seeded as the parameter tangent. Returns
/// (loss, gradient, H v).
pub fn hvp_exact<O: Objective>(
    obj: &O,
    theta: &ParameterStore,
    v: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if v.len() != theta.dim() {
        return Err(Error::Dimension(format!(
            "direction length {} does not match parameter dimension {}",
            v.len(),
            theta.dim()
        )));
    }
    let mut tape: Tape<Dual> = Tape::new();
    let mut binder = Binder::new(theta, Some(v));
    let out = obj.loss(&mut tape, &mut binder)?;
    let loss = tape.scalar_value(out);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let adj = tape.backward(out, theta.dim());
    let mut gradient = Vec::with_capacity(adj.len());
    let mut hv = Vec::with_capacity(adj.len());
    for a in &adj {
        gradient.push(a.val());
        hv.push(a.tangent());
    }
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(
            "Hessian-vector product contains NaN/Inf".into(),
        ));
    }
    Ok((loss, gradient, hv))
}

/// Central finite-difference gradient with per-coordinate step
/// 1e-5 * max(1, |theta_i|); the standard oracle the reverse pass is
/// checked against.
pub fn finite_difference_gradient<O: Objective>(
    obj: &O,
    theta: &ParameterStore,
) -> Result<Vec<f64>> {
    let mut fd = vec![0.0; theta.dim()];
    let mut work = theta.clone();
    for i in 0..theta.dim() {
        let orig = theta.flat()[i];
        let h = 1e-5 * orig.abs().max(1.0);
        work.flat_mut()[i] = orig + h;
        let lp = loss_value(obj, &work)?;
        work.flat_mut()[i] = orig - h;
        let lm = loss_value(obj, &work)?;
        work.flat_mut()[i] = orig;
        fd[i] = (lp - lm) / (2.0 * h);
    }
    Ok(fd)
}

/// Max-norm relative disagreement between the reverse-mode gradient and the
/// finite-difference oracle.
pub fn gradient_max_rel_err<O: Objective>(obj: &O, theta: &ParameterStore) -> Result<f64> {
    let (_, ad) = grad(obj, theta)?;
    let fd = finite_difference_gradient(obj, theta)?;
    Ok(max_rel_err(&ad, &fd))
}

/// ||a - b||_inf / max(||b||_inf, 1e-10).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let denom = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-10);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / denom
}

/// Per-slot max-norm relative disagreement, for block-by-block reports.
pub fn gradient_rel_err_by_slot<O: Objective>(
    obj: &O,
    theta: &ParameterStore,
) -> Result<Vec<(String, f64)>> {
    let (_, ad) = grad(obj, theta)?;
    let fd = finite_difference_gradient(obj, theta)?;
    let denom = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-10);
    let mut out = Vec::new();
    for (name, offset, len) in theta.slots() {
        let worst = (offset..offset + len)
            .map(|k| (ad[k] - fd[k]).abs())
            .fold(0.0f64, f64::max)
            / denom;
        out.push((name.to_string(), worst));
    }
    Ok(out)
}
