//! Consensus mechanisms: learned positive-definite edge weights (SCWM/CCWM),
//! self- and cross-consensus forward passes, multi-head variants, and the
//! rotary position map. All forwards are built on the tape, so gradients and
//! Hessian-vector products come from the same code path the values do.

use std::rc::Rc;

use crate::autodiff::{Binder, NodeId, ParameterStore, Real, Tape};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::{matmul, Matrix};

/// Hyperparameters shared by the consensus variants. `dim` must be divisible
/// by `heads`; each head works on a `dim/heads` slice with its own weight
/// network of rank `rank` and edge hidden width `edge_hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusHyper {
    pub dim: usize,
    pub heads: usize,
    pub rank: usize,
    pub edge_hidden: usize,
    pub eta: f64,
    /// Rotary position base; None disables position rotation (required for
    /// the exact translation-invariance property of the update).
    pub rope_base: Option<f64>,
}

impl ConsensusHyper {
    /// Library defaults for the ablation axes: window handling lives with the
    /// graph, so only rank and edge width appear here.
    pub fn defaults(dim: usize, heads: usize) -> Self {
        ConsensusHyper {
            dim,
            heads,
            rank: 4,
            edge_hidden: 256,
            eta: 0.1,
            rope_base: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 {
            return Err(Error::Config("dim and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.rank == 0 || self.edge_hidden == 0 {
            return Err(Error::Config("rank and edge_hidden must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.rope_base.is_some() && self.dim % 2 != 0 {
            return Err(Error::Config(
                "rotary positions require an even embedding dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Bipartite edge structure for cross-consensus: edges run from source
/// positions (< n_src) to context positions (< n_ctx).
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub n_src: usize,
    pub n_ctx: usize,
    edges: Vec<(usize, usize)>,
}

impl BipartiteGraph {
    pub fn new(n_src: usize, n_ctx: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        for &(i, j) in &edges {
            if i >= n_src || j >= n_ctx {
                return Err(Error::Parameter(format!(
                    "bipartite edge ({i},{j}) out of range for {n_src}x{n_ctx}"
                )));
            }
        }
        Ok(BipartiteGraph { n_src, n_ctx, edges })
    }

    /// Windowed edge set over a common sequence length: pairs (i, j) with
    /// |i - j| <= w. Window zero keeps exactly the diagonal pairs.
    pub fn windowed(n: usize, w: usize) -> Self {
        let mut edges = vec![];
        for i in 0..n {
            for j in i.saturating_sub(w)..=(i + w).min(n.saturating_sub(1)) {
                edges.push((i, j));
            }
        }
        BipartiteGraph {
            n_src: n,
            n_ctx: n,
            edges,
        }
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

/// Reshape a flat vector into an Omega x omega matrix, row-major:
/// out[i][j] = v[i*omega + j].
pub fn reshape_rs(v: &[f64], omega_rows: usize, omega_cols: usize) -> Result<Matrix> {
    if v.len() != omega_rows * omega_cols {
        return Err(Error::Dimension(format!(
            "cannot reshape length {} into {omega_rows}x{omega_cols}",
            v.len()
        )));
    }
    Matrix::from_vec(omega_rows, omega_cols, v.to_vec())
}

/// Scale every nonzero row to unit L2 norm; zero rows pass through.
pub fn row_norm_rn(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm_sq: f64 = m.row(i).iter().map(|v| v * v).sum();
        if norm_sq > 0.0 {
            let inv = 1.0 / norm_sq.sqrt();
            for j in 0..m.cols() {
                out.set(i, j, m.get(i, j) * inv);
            }
        }
    }
    out
}

/// Rotary position map on an n x d sequence (row index = position):
/// coordinate pair (k, k + d/2) of row p rotates by angle p * base^(-2k/d).
pub fn rope_rotate(u: &Matrix, base: f64) -> Result<Matrix> {
    if u.cols() % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary positions require even dimension, got {}",
            u.cols()
        )));
    }
    if !(base > 0.0) {
        return Err(Error::Parameter(format!("base must be > 0, got {base}")));
    }
    let mut tape: Tape<f64> = Tape::new();
    let node = tape.constant(u.rows(), u.cols(), u.data());
    let rotated = tape.rope(node, base);
    Matrix::from_vec(u.rows(), u.cols(), tape.value(rotated).to_vec())
}

/// The (alpha, beta, Lambda, R) bundle produced per edge by the weight
/// networks. R = alpha I + beta Lambda^T Lambda is symmetric positive
/// definite with spectrum inside [alpha, alpha + beta].
#[derive(Debug, Clone)]
pub struct ConsensusEdgeWeight {
    pub src: usize,
    pub dst: usize,
    pub alpha: f64,
    pub beta: f64,
    /// rank x head_dim factor, rows normalized and scaled by 1/sqrt(rank).
    pub lambda: Matrix,
    pub r_matrix: Matrix,
}

impl ConsensusEdgeWeight {
    fn assemble(src: usize, dst: usize, alpha: f64, beta: f64, lambda: Matrix) -> Self {
        let d = lambda.cols();
        let ltl = matmul(&lambda.transpose(), &lambda).expect("lambda product");
        let mut r = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut v = beta * ltl.get(i, j);
                if i == j {
                    v += alpha;
                }
                r.set(i, j, v);
            }
        }
        ConsensusEdgeWeight {
            src,
            dst,
            alpha,
            beta,
            lambda,
            r_matrix: r,
        }
    }
}

/// Parameter bundle for one consensus layer (all heads), owning its store.
/// The same slot layout is reused inside the transformer harness under a
/// per-layer prefix.
#[derive(Debug, Clone)]
pub struct ConsensusParams {
    pub hyper: ConsensusHyper,
    pub cross: bool,
    store: ParameterStore,
}

pub(crate) const MLP_NAMES: [&str; 3] = ["phi_alpha", "phi_beta", "phi_lambda"];

/// Push the slots for one consensus layer into `store` under `prefix`.
pub fn init_consensus_slots(
    store: &mut ParameterStore,
    prefix: &str,
    hyper: &ConsensusHyper,
    cross: bool,
    rng: &mut Rng,
) -> Result<()> {
    hyper.validate()?;
    let d = hyper.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mat = |rng: &mut Rng, n: usize, s: f64| -> Vec<f64> {
        let mut v = vec![0.0; n];
        rng.fill_uniform(&mut v, s);
        v
    };
    store.push(&format!("{prefix}.w_s"), mat(rng, d * d, scale))?;
    store.push(&format!("{prefix}.b_s"), vec![0.0; d])?;
    if cross {
        store.push(&format!("{prefix}.w_c"), mat(rng, d * d, scale))?;
        store.push(&format!("{prefix}.b_c"), vec![0.0; d])?;
    }
    store.push(&format!("{prefix}.w_o"), mat(rng, d * d, scale))?;
    store.push(&format!("{prefix}.b_o"), vec![0.0; d])?;
    let xi = hyper.edge_hidden;
    let in_scale = 1.0 / (2.0 * d as f64).sqrt();
    let hid_scale = 1.0 / (xi as f64).sqrt();
    for h in 0..hyper.heads {
        for mlp in MLP_NAMES {
            store.push(
                &format!("{prefix}.head{h}.{mlp}.w1"),
                mat(rng, 2 * d * xi, in_scale),
            )?;
            store.push(&format!("{prefix}.head{h}.{mlp}.b1"), vec![0.0; xi])?;
            store.push(
                &format!("{prefix}.head{h}.{mlp}.w2"),
                mat(rng, xi * xi, hid_scale),
            )?;
            store.push(&format!("{prefix}.head{h}.{mlp}.b2"), vec![0.0; xi])?;
        }
        let rdh = hyper.rank * hyper.head_dim();
        store.push(&format!("{prefix}.head{h}.w_alpha"), mat(rng, xi, hid_scale))?;
        store.push(&format!("{prefix}.head{h}.b_alpha"), vec![0.0])?;
        store.push(&format!("{prefix}.head{h}.w_beta"), mat(rng, xi, hid_scale))?;
        store.push(&format!("{prefix}.head{h}.b_beta"), vec![0.0])?;
        store.push(
            &format!("{prefix}.head{h}.w_lambda"),
            mat(rng, xi * rdh, hid_scale),
        )?;
        store.push(&format!("{prefix}.head{h}.b_lambda"), vec![0.0; rdh])?;
    }
    Ok(())
}

impl ConsensusParams {
    pub fn init_self(hyper: ConsensusHyper, rng: &mut Rng) -> Result<Self> {
        let mut store = ParameterStore::new();
        init_consensus_slots(&mut store, "sc", &hyper, false, rng)?;
        Ok(ConsensusParams {
            hyper,
            cross: false,
            store,
        })
    }

    pub fn init_cross(hyper: ConsensusHyper, rng: &mut Rng) -> Result<Self> {
        let mut store = ParameterStore::new();
        init_consensus_slots(&mut store, "sc", &hyper, true, rng)?;
        Ok(ConsensusParams {
            hyper,
            cross: true,
            store,
        })
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    fn prefix(&self) -> &'static str {
        "sc"
    }
}

/// Tape-level edge-weight computation for one head. Returns
/// (alpha E x 1, beta E x 1, lambda E x (rank * head_dim)).
#[allow(clippy::too_many_arguments)]
fn weight_network<S: Real>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    head: usize,
    hyper: &ConsensusHyper,
    edge_inputs: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let d = hyper.dim;
    let xi = hyper.edge_hidden;
    let rdh = hyper.rank * hyper.head_dim();
    let mlp = |tape: &mut Tape<S>, binder: &mut Binder<'_, S>, name: &str| -> Result<NodeId> {
        let w1 = binder.param(tape, &format!("{prefix}.head{head}.{name}.w1"), 2 * d, xi)?;
        let b1 = binder.param(tape, &format!("{prefix}.head{head}.{name}.b1"), 1, xi)?;
        let w2 = binder.param(tape, &format!("{prefix}.head{head}.{name}.w2"), xi, xi)?;
        let b2 = binder.param(tape, &format!("{prefix}.head{head}.{name}.b2"), 1, xi)?;
        let h1 = tape.matmul(edge_inputs, w1);
        let h1b = tape.add_row_broadcast(h1, b1);
        let act = tape.gelu(h1b);
        let h2 = tape.matmul(act, w2);
        Ok(tape.add_row_broadcast(h2, b2))
    };
    let feat_alpha = mlp(tape, binder, "phi_alpha")?;
    let feat_beta = mlp(tape, binder, "phi_beta")?;
    let feat_lambda = mlp(tape, binder, "phi_lambda")?;

    let w_alpha = binder.param(tape, &format!("{prefix}.head{head}.w_alpha"), xi, 1)?;
    let b_alpha = binder.param(tape, &format!("{prefix}.head{head}.b_alpha"), 1, 1)?;
    let pre_alpha = tape.matmul(feat_alpha, w_alpha);
    let pre_alpha = tape.add_row_broadcast(pre_alpha, b_alpha);
    let alpha = tape.softplus(pre_alpha);

    let w_beta = binder.param(tape, &format!("{prefix}.head{head}.w_beta"), xi, 1)?;
    let b_beta = binder.param(tape, &format!("{prefix}.head{head}.b_beta"), 1, 1)?;
    let pre_beta = tape.matmul(feat_beta, w_beta);
    let pre_beta = tape.add_row_broadcast(pre_beta, b_beta);
    let beta = tape.softplus(pre_beta);

    let w_lambda = binder.param(tape, &format!("{prefix}.head{head}.w_lambda"), xi, rdh)?;
    let b_lambda = binder.param(tape, &format!("{prefix}.head{head}.b_lambda"), 1, rdh)?;
    let raw = tape.matmul(feat_lambda, w_lambda);
    let raw = tape.add_row_broadcast(raw, b_lambda);
    let normed = tape.group_row_norm(raw, hyper.head_dim());
    let lambda = tape.scale(normed, 1.0 / (hyper.rank as f64).sqrt());
    Ok((alpha, beta, lambda))
}

/// Shared consensus core: given projected (and possibly rotated) per-head
/// source values plus per-edge difference targets, apply the weighted
/// low-rank message R(diff) = alpha diff + beta Lambda^T Lambda diff.
fn edge_messages<S: Real>(
    tape: &mut Tape<S>,
    alpha: NodeId,
    beta: NodeId,
    lambda: NodeId,
    diff: NodeId,
    rank: usize,
) -> NodeId {
    let scaled_id = tape.mul_col_broadcast(diff, alpha);
    let low_rank = tape.edge_low_rank(lambda, diff, rank);
    let scaled_lr = tape.mul_col_broadcast(low_rank, beta);
    tape.add(scaled_id, scaled_lr)
}

pub struct ConsensusTrace {
    pub output: Matrix,
    /// The aggregated update direction g per position (n x d).
    pub g: Matrix,
    /// Per-head edge weights, head-major.
    pub weights: Vec<Vec<ConsensusEdgeWeight>>,
}

/// Build the multi-head self-consensus forward on the tape. Returns the
/// output node plus the concatenated g node for diagnostics.
pub fn self_consensus_tape<S: Real>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    hyper: &ConsensusHyper,
    graph: &Graph,
    y: NodeId,
) -> Result<(NodeId, NodeId)> {
    hyper.validate()?;
    let (n, d) = tape.shape(y);
    if d != hyper.dim {
        return Err(Error::Dimension(format!(
            "input width {d} does not match configured dim {}",
            hyper.dim
        )));
    }
    if n != graph.n() {
        return Err(Error::Dimension(format!(
            "sequence length {n} does not match graph order {}",
            graph.n()
        )));
    }
    let dh = hyper.head_dim();

    let w_s = binder.param(tape, &format!("{prefix}.w_s"), d, d)?;
    let b_s = binder.param(tape, &format!("{prefix}.b_s"), 1, d)?;
    let u_pre = tape.matmul(y, w_s);
    let u = tape.add_row_broadcast(u_pre, b_s);
    let u_rot = match hyper.rope_base {
        Some(base) => tape.rope(u, base),
        None => u,
    };

    let srcs: Rc<Vec<usize>> = Rc::new(graph.edges().iter().map(|e| e.src).collect());
    let dsts: Rc<Vec<usize>> = Rc::new(graph.edges().iter().map(|e| e.dst).collect());

    let (g_all, u_prime) = if srcs.is_empty() {
        let zeros = tape.constant(n, d, &vec![0.0; n * d]);
        (zeros, u)
    } else {
        let y_src = tape.gather_rows(y, srcs.clone());
        let y_dst = tape.gather_rows(y, dsts.clone());
        let edge_inputs = tape.concat_cols(&[y_src, y_dst]);

        let mut head_updates = Vec::with_capacity(hyper.heads);
        let mut head_gs = Vec::with_capacity(hyper.heads);
        for h in 0..hyper.heads {
            let (alpha, beta, lambda) =
                weight_network(tape, binder, prefix, h, hyper, edge_inputs)?;
            let u_h = tape.slice_cols(u_rot, h * dh, dh);
            let us = tape.gather_rows(u_h, srcs.clone());
            let ud = tape.gather_rows(u_h, dsts.clone());
            let diff = tape.sub(us, ud);
            let msg = edge_messages(tape, alpha, beta, lambda, diff, hyper.rank);
            let out_src = tape.scatter_add_rows(msg, srcs.clone(), n);
            let in_dst = tape.scatter_add_rows(msg, dsts.clone(), n);
            let g_h = tape.sub(out_src, in_dst);
            let u_plain_h = tape.slice_cols(u, h * dh, dh);
            let g_scaled = tape.scale(g_h, hyper.eta);
            head_updates.push(tape.sub(u_plain_h, g_scaled));
            head_gs.push(g_h);
        }
        let u_prime = tape.concat_cols(&head_updates);
        let g_all = tape.concat_cols(&head_gs);
        (g_all, u_prime)
    };

    let w_o = binder.param(tape, &format!("{prefix}.w_o"), d, d)?;
    let b_o = binder.param(tape, &format!("{prefix}.b_o"), 1, d)?;
    let projected = tape.matmul(u_prime, w_o);
    let y_out = tape.add_row_broadcast(projected, b_o);
    Ok((y_out, g_all))
}

/// Build the multi-head cross-consensus forward on the tape. Only the source
/// track is updated; context embeddings are read-only.
pub fn cross_consensus_tape<S: Real>(
    tape: &mut Tape<S>,
    binder: &mut Binder<'_, S>,
    prefix: &str,
    hyper: &ConsensusHyper,
    graph: &BipartiteGraph,
    y: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    hyper.validate()?;
    let (n, d) = tape.shape(y);
    let (j, dc) = tape.shape(c);
    if d != hyper.dim || dc != hyper.dim {
        return Err(Error::Dimension(format!(
            "track widths ({d}, {dc}) do not match configured dim {}",
            hyper.dim
        )));
    }
    if n != graph.n_src || j != graph.n_ctx {
        return Err(Error::Dimension(format!(
            "track lengths ({n}, {j}) do not match bipartite structure ({}, {})",
            graph.n_src, graph.n_ctx
        )));
    }
    let dh = hyper.head_dim();

    let w_s = binder.param(tape, &format!("{prefix}.w_s"), d, d)?;
    let b_s = binder.param(tape, &format!("{prefix}.b_s"), 1, d)?;
    let u_pre = tape.matmul(y, w_s);
    let u = tape.add_row_broadcast(u_pre, b_s);
    let w_c = binder.param(tape, &format!("{prefix}.w_c"), d, d)?;
    let b_c = binder.param(tape, &format!("{prefix}.b_c"), 1, d)?;
    let v_pre = tape.matmul(c, w_c);
    let v = tape.add_row_broadcast(v_pre, b_c);

    let (u_rot, v_rot) = match hyper.rope_base {
        Some(base) => (tape.rope(u, base), tape.rope(v, base)),
        None => (u, v),
    };

    let srcs: Rc<Vec<usize>> = Rc::new(graph.edges().iter().map(|e| e.0).collect());
    let dsts: Rc<Vec<usize>> = Rc::new(graph.edges().iter().map(|e| e.1).collect());

    let (g_all, u_prime) = if srcs.is_empty() {
        let zeros = tape.constant(n, d, &vec![0.0; n * d]);
        (zeros, u)
    } else {
        let y_src = tape.gather_rows(y, srcs.clone());
        let c_dst = tape.gather_rows(c, dsts.clone());
        let edge_inputs = tape.concat_cols(&[y_src, c_dst]);

        let mut head_updates = Vec::with_capacity(hyper.heads);
        let mut head_gs = Vec::with_capacity(hyper.heads);
        for h in 0..hyper.heads {
            let (alpha, beta, lambda) =
                weight_network(tape, binder, prefix, h, hyper, edge_inputs)?;
            let u_h = tape.slice_cols(u_rot, h * dh, dh);
            let v_h = tape.slice_cols(v_rot, h * dh, dh);
            let us = tape.gather_rows(u_h, srcs.clone());
            let vd = tape.gather_rows(v_h, dsts.clone());
            let diff = tape.sub(us, vd);
            let msg = edge_messages(tape, alpha, beta, lambda, diff, hyper.rank);
            let g_h = tape.scatter_add_rows(msg, srcs.clone(), n);
            let u_plain_h = tape.slice_cols(u, h * dh, dh);
            let g_scaled = tape.scale(g_h, hyper.eta);
            head_updates.push(tape.sub(u_plain_h, g_scaled));
            head_gs.push(g_h);
        }
        (tape.concat_cols(&head_gs), tape.concat_cols(&head_updates))
    };

    let w_o = binder.param(tape, &format!("{prefix}.w_o"), d, d)?;
    let b_o = binder.param(tape, &format!("{prefix}.b_o"), 1, d)?;
    let projected = tape.matmul(u_prime, w_o);
    let y_out = tape.add_row_broadcast(projected, b_o);
    Ok((y_out, g_all))
}

fn extract(tape: &Tape<f64>, id: NodeId) -> Matrix {
    let (r, c) = tape.shape(id);
    Matrix::from_vec(r, c, tape.value(id).to_vec()).expect("tape value shape")
}

fn finite_input(name: &str, m: &Matrix) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("{name} contains NaN/Inf")));
    }
    Ok(())
}

/// Edge weights for one head of the self-consensus weight network.
pub fn scwm_head(
    y: &Matrix,
    graph: &Graph,
    params: &ConsensusParams,
    head: usize,
) -> Result<Vec<ConsensusEdgeWeight>> {
    finite_input("embeddings", y)?;
    if y.rows() != graph.n() {
        return Err(Error::Dimension(format!(
            "sequence length {} does not match graph order {}",
            y.rows(),
            graph.n()
        )));
    }
    if y.cols() != params.hyper.dim {
        return Err(Error::Dimension(format!(
            "input width {} does not match configured dim {}",
            y.cols(),
            params.hyper.dim
        )));
    }
    let pairs: Vec<(usize, usize)> = graph.edges().iter().map(|e| (e.src, e.dst)).collect();
    edge_weights_for_pairs(y, y, &pairs, params, head)
}

/// Single-head self-consensus weight map (requires heads == 1).
pub fn scwm(y: &Matrix, graph: &Graph, params: &ConsensusParams) -> Result<Vec<ConsensusEdgeWeight>> {
    require_single_head(params)?;
    scwm_head(y, graph, params, 0)
}

/// Edge weights for one head of the cross-consensus weight network.
pub fn ccwm_head(
    y: &Matrix,
    c: &Matrix,
    graph: &BipartiteGraph,
    params: &ConsensusParams,
    head: usize,
) -> Result<Vec<ConsensusEdgeWeight>> {
    finite_input("source embeddings", y)?;
    finite_input("context embeddings", c)?;
    if y.rows() != graph.n_src || c.rows() != graph.n_ctx {
        return Err(Error::Dimension(
            "track lengths do not match bipartite structure".into(),
        ));
    }
    edge_weights_for_pairs(y, c, graph.edges(), params, head)
}

/// Single-head cross-consensus weight map (requires heads == 1).
pub fn ccwm(
    y: &Matrix,
    c: &Matrix,
    graph: &BipartiteGraph,
    params: &ConsensusParams,
) -> Result<Vec<ConsensusEdgeWeight>> {
    require_single_head(params)?;
    ccwm_head(y, c, graph, params, 0)
}

fn require_single_head(params: &ConsensusParams) -> Result<()> {
    if params.hyper.heads != 1 {
        return Err(Error::Config(format!(
            "single-head entry point called with {} heads",
            params.hyper.heads
        )));
    }
    Ok(())
}

fn edge_weights_for_pairs(
    left: &Matrix,
    right: &Matrix,
    pairs: &[(usize, usize)],
    params: &ConsensusParams,
    head: usize,
) -> Result<Vec<ConsensusEdgeWeight>> {
    let hyper = &params.hyper;
    hyper.validate()?;
    if head >= hyper.heads {
        return Err(Error::Config(format!(
            "head {head} out of range for {} heads",
            hyper.heads
        )));
    }
    if left.cols() != hyper.dim || right.cols() != hyper.dim {
        return Err(Error::Dimension(format!(
            "edge networks expect width {} inputs",
            hyper.dim
        )));
    }
    if pairs.is_empty() {
        return Ok(vec![]);
    }
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(params.store(), None);
    let srcs: Rc<Vec<usize>> = Rc::new(pairs.iter().map(|p| p.0).collect());
    let dsts: Rc<Vec<usize>> = Rc::new(pairs.iter().map(|p| p.1).collect());
    let left_node = tape.constant(left.rows(), left.cols(), left.data());
    let right_node = tape.constant(right.rows(), right.cols(), right.data());
    let ls = tape.gather_rows(left_node, srcs);
    let rd = tape.gather_rows(right_node, dsts);
    let edge_inputs = tape.concat_cols(&[ls, rd]);
    let (alpha, beta, lambda) =
        weight_network(&mut tape, &mut binder, params.prefix(), head, hyper, edge_inputs)?;

    let alphas = tape.value(alpha).to_vec();
    let betas = tape.value(beta).to_vec();
    let lambdas = tape.value(lambda).to_vec();
    let (rank, dh) = (hyper.rank, hyper.head_dim());
    let mut out = Vec::with_capacity(pairs.len());
    for (e, &(src, dst)) in pairs.iter().enumerate() {
        let lam = Matrix::from_vec(
            rank,
            dh,
            lambdas[e * rank * dh..(e + 1) * rank * dh].to_vec(),
        )?;
        out.push(ConsensusEdgeWeight::assemble(
            src, dst, alphas[e], betas[e], lam,
        ));
    }
    Ok(out)
}

fn run_self(
    y: &Matrix,
    graph: &Graph,
    params: &ConsensusParams,
) -> Result<(Matrix, Matrix)> {
    finite_input("embeddings", y)?;
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(params.store(), None);
    let y_node = tape.constant(y.rows(), y.cols(), y.data());
    let (out, g) = self_consensus_tape(
        &mut tape,
        &mut binder,
        params.prefix(),
        &params.hyper,
        graph,
        y_node,
    )?;
    Ok((extract(&tape, out), extract(&tape, g)))
}

fn run_cross(
    y: &Matrix,
    c: &Matrix,
    graph: &BipartiteGraph,
    params: &ConsensusParams,
) -> Result<(Matrix, Matrix)> {
    finite_input("source embeddings", y)?;
    finite_input("context embeddings", c)?;
    if !params.cross {
        return Err(Error::Config(
            "parameters were initialized without a context projection".into(),
        ));
    }
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(params.store(), None);
    let y_node = tape.constant(y.rows(), y.cols(), y.data());
    let c_node = tape.constant(c.rows(), c.cols(), c.data());
    let (out, g) = cross_consensus_tape(
        &mut tape,
        &mut binder,
        params.prefix(),
        &params.hyper,
        graph,
        y_node,
        c_node,
    )?;
    Ok((extract(&tape, out), extract(&tape, g)))
}

/// Single-head self-consensus forward (heads must equal 1).
pub fn self_consensus_forward(y: &Matrix, graph: &Graph, params: &ConsensusParams) -> Result<Matrix> {
    require_single_head(params)?;
    Ok(run_self(y, graph, params)?.0)
}

/// Single-head self-consensus forward returning the update direction g too.
pub fn self_consensus_trace(
    y: &Matrix,
    graph: &Graph,
    params: &ConsensusParams,
) -> Result<ConsensusTrace> {
    let (output, g) = run_self(y, graph, params)?;
    let mut weights = Vec::with_capacity(params.hyper.heads);
    for h in 0..params.hyper.heads {
        weights.push(scwm_head(y, graph, params, h)?);
    }
    Ok(ConsensusTrace { output, g, weights })
}

/// Multi-head self-consensus forward.
pub fn multi_head_self_consensus(
    y: &Matrix,
    graph: &Graph,
    params: &ConsensusParams,
) -> Result<Matrix> {
    Ok(run_self(y, graph, params)?.0)
}

/// Single-head cross-consensus forward (heads must equal 1).
pub fn cross_consensus_forward(
    y: &Matrix,
    c: &Matrix,
    graph: &BipartiteGraph,
    params: &ConsensusParams,
) -> Result<Matrix> {
    require_single_head(params)?;
    Ok(run_cross(y, c, graph, params)?.0)
}

/// Multi-head cross-consensus forward.
pub fn multi_head_cross_consensus(
    y: &Matrix,
    c: &Matrix,
    graph: &BipartiteGraph,
    params: &ConsensusParams,
) -> Result<Matrix> {
    Ok(run_cross(y, c, graph, params)?.0)
}

/// Cross-consensus forward returning the update direction g.
pub fn cross_consensus_trace(
    y: &Matrix,
    c: &Matrix,
    graph: &BipartiteGraph,
    params: &ConsensusParams,
) -> Result<ConsensusTrace> {
    let (output, g) = run_cross(y, c, graph, params)?;
    let mut weights = Vec::with_capacity(params.hyper.heads);
    for h in 0..params.hyper.heads {
        weights.push(ccwm_head(y, c, graph, params, h)?);
    }
    Ok(ConsensusTrace { output, g, weights })
}
