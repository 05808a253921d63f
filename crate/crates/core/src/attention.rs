//! Attention baselines: standard multi-head self-attention, banded
//! sliding-window attention, and cross-attention. These are the comparison
//! mechanisms for the consensus layers and share the same tape primitives.

use std::rc::Rc;

use crate::autodiff::{Binder, NodeId, ParameterStore, Real, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Additive logit used to null out-of-band pairs in masked formulations.
/// exp(SW_MASK_VALUE - max) underflows to exactly zero in f64, so a banded
/// computation and a masked dense computation agree bit for bit.
pub const SW_MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHyper {
    pub dim: usize,
    pub heads: usize,
    pub rope_base: Option<f64>,
    /// Sliding-window half-width; None means full attention.
    pub window: Option<usize>,
}

impl AttentionHyper {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("dim and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.rope_base.is_some() && self.head_dim() % 2 != 0 {
            return Err(Error::Config(
                "rotary positions require an even head dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Push query/key/value/output projection slots under `prefix`.
pub fn init_attention_slots(
    store: &mut ParameterStore,
    prefix: &str,
    hyper: &AttentionHyper,
    rng: &mut Rng,
) -> Result<()> {
    hyper.validate()?;
    let d = hyper.dim;
    let scale = 1.0 / (d as f64).sqrt();
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        let mut w = vec![0.0; d * d];
        rng.fill_uniform(&mut w, scale);
        store.push(&format!("{prefix}.{name}"), w)?;
    }
    for name in ["b_q", "b_k", "b_v", "b_o"] {
        store.push(&format!("{prefix}.{name}"), vec![0.0; d])?;
    }
    Ok(())
}

/// Band edge list for sliding-window attention: pairs (i, j) with
/// |i - j| <= w, source-major so segment ids are nondecreasing. The band
/// includes the diagonal, so every query attends to at least itself.
pub fn band_edges(n: usize, w: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let mut srcs = vec![];
    let mut dsts = vec![];
    for i in 0..n {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(n.saturating_sub(1));
        for j in lo..=hi {
            srcs.push(i);
            dsts.push(j);
        }
    }
    (Rc::new(srcs), Rc::new(dsts))
}

fn project<S: Real>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    which: &str,
    d: usize,
    x: NodeId,
) -> Result<NodeId> {
    let w = binder.param(tape, &format!("{prefix}.w_{which}"), d, d)?;
    let b = binder.param(tape, &format!("{prefix}.b_{which}"), 1, d)?;
    let p = tape.matmul(x, w);
    Ok(tape.add_row_broadcast(p, b))
}

fn maybe_rope<S: Real>(tape: &mut Tape<S>, hyper: &AttentionHyper, x: NodeId) -> NodeId {
    match hyper.rope_base {
        Some(base) => tape.rope(x, base),
        None => x,
    }
}

/// Dense multi-head attention with queries from `y` and keys/values from
/// `ctx` (pass `ctx = y` for self-attention). Returns the output node and
/// the per-head attention weight nodes for inspection.
pub fn dense_attention_tape<S: Real>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    hyper: &AttentionHyper,
    y: NodeId,
    ctx: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    hyper.validate()?;
    let (_, d) = tape.shape(y);
    let (_, dc) = tape.shape(ctx);
    if d != hyper.dim || dc != hyper.dim {
        return Err(Error::Dimension(format!(
            "attention expects width {} inputs, got {d} and {dc}",
            hyper.dim
        )));
    }
    let dh = hyper.head_dim();
    let q = project(tape, binder, prefix, "q", d, y)?;
    let k = project(tape, binder, prefix, "k", d, ctx)?;
    let v = project(tape, binder, prefix, "v", d, ctx)?;

    let mut head_outputs = Vec::with_capacity(hyper.heads);
    let mut head_weights = Vec::with_capacity(hyper.heads);
    for h in 0..hyper.heads {
        let q_h = tape.slice_cols(q, h * dh, dh);
        let k_h = tape.slice_cols(k, h * dh, dh);
        let v_h = tape.slice_cols(v, h * dh, dh);
        let q_h = maybe_rope(tape, hyper, q_h);
        let k_h = maybe_rope(tape, hyper, k_h);
        let k_t = tape.transpose(k_h);
        let scores = tape.matmul(q_h, k_t);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax_rows(scaled);
        head_weights.push(weights);
        head_outputs.push(tape.matmul(weights, v_h));
    }
    let cat = tape.concat_cols(&head_outputs);
    let w_o = binder.param(tape, &format!("{prefix}.w_o"), d, d)?;
    let b_o = binder.param(tape, &format!("{prefix}.b_o"), 1, d)?;
    let proj = tape.matmul(cat, w_o);
    Ok((tape.add_row_broadcast(proj, b_o), head_weights))
}

/// Banded sliding-window attention. Work is proportional to the band size,
/// not the sequence length squared; softmax runs over each query's band
/// segment, which equals the masked dense formulation exactly.
pub fn sliding_window_tape<S: Real>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    hyper: &AttentionHyper,
    y: NodeId,
) -> Result<NodeId> {
    hyper.validate()?;
    let w = hyper.window.ok_or_else(|| {
        Error::Config("sliding-window attention requires a window size".into())
    })?;
    let (n, d) = tape.shape(y);
    if d != hyper.dim {
        return Err(Error::Dimension(format!(
            "attention expects width {} inputs, got {d}",
            hyper.dim
        )));
    }
    let dh = hyper.head_dim();
    let (srcs, dsts) = band_edges(n, w);
    let q = project(tape, binder, prefix, "q", d, y)?;
    let k = project(tape, binder, prefix, "k", d, y)?;
    let v = project(tape, binder, prefix, "v", d, y)?;

    let mut head_outputs = Vec::with_capacity(hyper.heads);
    for h in 0..hyper.heads {
        let q_h = tape.slice_cols(q, h * dh, dh);
        let k_h = tape.slice_cols(k, h * dh, dh);
        let v_h = tape.slice_cols(v, h * dh, dh);
        let q_h = maybe_rope(tape, hyper, q_h);
        let k_h = maybe_rope(tape, hyper, k_h);
        let qe = tape.gather_rows(q_h, srcs.clone());
        let ke = tape.gather_rows(k_h, dsts.clone());
        let logits = tape.row_dot(qe, ke);
        let scaled = tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let probs = tape.segment_softmax(scaled, srcs.clone());
        let ve = tape.gather_rows(v_h, dsts.clone());
        let weighted = tape.mul_col_broadcast(ve, probs);
        head_outputs.push(tape.scatter_add_rows(weighted, srcs.clone(), n));
    }
    let cat = tape.concat_cols(&head_outputs);
    let w_o = binder.param(tape, &format!("{prefix}.w_o"), d, d)?;
    let b_o = binder.param(tape, &format!("{prefix}.b_o"), 1, d)?;
    let proj = tape.matmul(cat, w_o);
    Ok(tape.add_row_broadcast(proj, b_o))
}

/// Standalone attention parameter bundle mirroring the consensus wrapper.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub hyper: AttentionHyper,
    store: ParameterStore,
}

impl AttentionParams {
    pub fn init(hyper: AttentionHyper, rng: &mut Rng) -> Result<Self> {
        let mut store = ParameterStore::new();
        init_attention_slots(&mut store, "attn", &hyper, rng)?;
        Ok(AttentionParams { hyper, store })
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }
}

fn extract(tape: &Tape<f64>, id: NodeId) -> Matrix {
    let (r, c) = tape.shape(id);
    Matrix::from_vec(r, c, tape.value(id).to_vec()).expect("tape value shape")
}

fn check_finite(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("{name} contains NaN/Inf")));
    }
    Ok(())
}

pub struct AttentionTrace {
    pub output: Matrix,
    /// Row-stochastic attention weights per head (dense paths only).
    pub weights: Vec<Matrix>,
}

/// Standard multi-head self-attention forward.
pub fn self_attention_forward(y: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    Ok(self_attention_trace(y, params)?.output)
}

pub fn self_attention_trace(y: &Matrix, params: &AttentionParams) -> Result<AttentionTrace> {
    check_finite("embeddings", y)?;
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(params.store(), None);
    let y_node = tape.constant(y.rows(), y.cols(), y.data());
    let (out, weights) =
        dense_attention_tape(&mut tape, &mut binder, "attn", &params.hyper, y_node, y_node)?;
    Ok(AttentionTrace {
        output: extract(&tape, out),
        weights: weights.iter().map(|&wid| extract(&tape, wid)).collect(),
    })
}

/// Sliding-window self-attention forward; `params.hyper.window` must be set.
pub fn sliding_window_attention_forward(y: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    check_finite("embeddings", y)?;
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(params.store(), None);
    let y_node = tape.constant(y.rows(), y.cols(), y.data());
    let out = sliding_window_tape(&mut tape, &mut binder, "attn", &params.hyper, y_node)?;
    Ok(extract(&tape, out))
}

/// Cross-attention: queries from `y`, keys and values from `c`.
pub fn cross_attention_forward(y: &Matrix, c: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    Ok(cross_attention_trace(y, c, params)?.output)
}

pub fn cross_attention_trace(
    y: &Matrix,
    c: &Matrix,
    params: &AttentionParams,
) -> Result<AttentionTrace> {
    check_finite("source embeddings", y)?;
    check_finite("context embeddings", c)?;
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(params.store(), None);
    let y_node = tape.constant(y.rows(), y.cols(), y.data());
    let c_node = tape.constant(c.rows(), c.cols(), c.data());
    let (out, weights) =
        dense_attention_tape(&mut tape, &mut binder, "attn", &params.hyper, y_node, c_node)?;
    Ok(AttentionTrace {
        output: extract(&tape, out),
        weights: weights.iter().map(|&wid| extract(&tape, wid)).collect(),
    })
}
