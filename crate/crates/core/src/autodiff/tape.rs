//! Recording tape: a flat arena of shaped value nodes plus the primitive
//! operation that produced each one. Every primitive carries a hand-written
//! adjoint; the backward pass walks the arena in reverse. The closed set of
//! primitives is what keeps exact Hessian-vector products feasible.

use std::rc::Rc;

use super::scalar::{gelu, gelu_derivative, sigmoid, softplus, Real};

pub type NodeId = usize;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf { offset: usize },
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    MulColBroadcast(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId },
    GroupRowNorm { x: NodeId, group_cols: usize },
    GatherRows { x: NodeId, idx: Rc<Vec<usize>> },
    ScatterAddRows { x: NodeId, idx: Rc<Vec<usize>> },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    Rope { x: NodeId, base: f64 },
    EdgeLowRank { lambda: NodeId, x: NodeId, rank: usize },
    RowDot(NodeId, NodeId),
    SegmentSoftmax { x: NodeId, seg: Rc<Vec<usize>> },
    CrossEntropyMean { logits: NodeId, targets: Rc<Vec<usize>> },
    SumAll(NodeId),
    Dot(NodeId, NodeId),
}

struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op,
}

pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].value.len(), 1, "node is not a scalar");
        self.nodes[id].value[0].val()
    }

    /// Parameter leaf backed by a flat slot at `offset` in the gradient
    /// vector. Values (and tangents, in dual mode) come from the caller.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<S>, offset: usize) -> NodeId {
        self.push(rows, cols, value, Op::Leaf { offset })
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        let value = data.iter().map(|&x| S::from_f64(x)).collect();
        self.push(rows, cols, value, Op::Const)
    }

    pub fn constant_values(&mut self, rows: usize, cols: usize, value: Vec<S>) -> NodeId {
        self.push(rows, cols, value, Op::Const)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (r, c) = self.shape(a);
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(r, c, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let (r, c) = self.shape(a);
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(r, c, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (r, c) = self.shape(a);
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(r, c, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cc) = self.shape(a);
        let value = self.nodes[a].value.iter().map(|&x| x.mul_f64(c)).collect();
        self.push(r, cc, value, Op::Scale(a, c))
    }

    /// Matrix plus a 1 x n row vector broadcast over rows (bias add).
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, c), "row broadcast shape mismatch");
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                value.push(self.nodes[a].value[i * c + j] + self.nodes[row].value[j]);
            }
        }
        self.push(r, c, value, Op::AddRowBroadcast(a, row))
    }

    /// Matrix times an m x 1 column broadcast over columns (per-row scale).
    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let (cr, cc) = self.shape(col);
        assert_eq!((cr, cc), (r, 1), "column broadcast shape mismatch");
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = self.nodes[col].value[i];
            for j in 0..c {
                value.push(self.nodes[a].value[i * c + j] * s);
            }
        }
        self.push(r, c, value, Op::MulColBroadcast(a, col))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let value = matmul_kernel(&self.nodes[a].value, m, k, &self.nodes[b].value, n);
        self.push(m, n, value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a].value;
        let mut value = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, value, Op::Transpose(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let value = self.nodes[a].value.iter().map(|&x| softplus(x)).collect();
        self.push(r, c, value, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let value = self.nodes[a].value.iter().map(|&x| gelu(x)).collect();
        self.push(r, c, value, Op::Gelu(a))
    }

    /// Row-wise softmax with max subtraction. The shift is a primal constant,
    /// which leaves both the value and all derivatives exact.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a].value;
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            softmax_into(row, &mut value);
        }
        self.push(r, c, value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "gamma shape mismatch");
        assert_eq!(self.shape(beta), (1, c), "beta shape mismatch");
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.nodes[x].value[i * c..(i + 1) * c];
            let (xhat, _std) = layer_norm_row(row);
            for j in 0..c {
                value.push(self.nodes[gamma].value[j] * xhat[j] + self.nodes[beta].value[j]);
            }
        }
        self.push(r, c, value, Op::LayerNormRows { x, gamma, beta })
    }

    /// Per-row grouped row-norm: each tape row is viewed as consecutive
    /// groups of `group_cols` entries; every nonzero group is scaled to unit
    /// L2 norm, zero groups pass through.
    pub fn group_row_norm(&mut self, x: NodeId, group_cols: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(c % group_cols, 0, "group size must divide row width");
        let src = &self.nodes[x].value;
        let mut value = Vec::with_capacity(r * c);
        for g in 0..(r * c / group_cols) {
            let group = &src[g * group_cols..(g + 1) * group_cols];
            let norm_sq = group.iter().fold(S::zero(), |acc, &v| acc + v * v);
            if norm_sq.val() > 0.0 {
                let inv = S::one() / norm_sq.sqrt();
                value.extend(group.iter().map(|&v| v * inv));
            } else {
                value.extend_from_slice(group);
            }
        }
        self.push(r, c, value, Op::GroupRowNorm { x, group_cols })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let (n, c) = self.shape(x);
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < n, "gather index out of range");
            value.extend_from_slice(&self.nodes[x].value[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        self.push(rows, c, value, Op::GatherRows { x, idx })
    }

    /// out[i] = sum of x rows k with idx[k] == i. Accumulation follows the
    /// index order, so the reduction order is fixed regardless of callers.
    pub fn scatter_add_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>, out_rows: usize) -> NodeId {
        let (e, c) = self.shape(x);
        assert_eq!(e, idx.len(), "scatter index length mismatch");
        let mut value = vec![S::zero(); out_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < out_rows, "scatter index out of range");
            for j in 0..c {
                value[i * c + j] = value[i * c + j] + self.nodes[x].value[k * c + j];
            }
        }
        self.push(out_rows, c, value, Op::ScatterAddRows { x, idx })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, r, "concat row mismatch");
                value.extend_from_slice(&self.nodes[p].value[i * pc..(i + 1) * pc]);
            }
        }
        self.push(r, total, value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "column slice out of range");
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&self.nodes[x].value[i * c + start..i * c + start + len]);
        }
        self.push(r, len, value, Op::SliceCols { x, start })
    }

    /// Rotary position map: row p gets each coordinate pair (k, k + d/2)
    /// rotated by angle p * base^(-2k/d). Orthogonal per row.
    pub fn rope(&mut self, x: NodeId, base: f64) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(c % 2, 0, "rope requires even width");
        let half = c / 2;
        let src = &self.nodes[x].value;
        let mut value = vec![S::zero(); r * c];
        for p in 0..r {
            for k in 0..half {
                let theta = rope_angle(p, k, half, base);
                let (s, co) = theta.sin_cos();
                let a = src[p * c + k];
                let b = src[p * c + k + half];
                value[p * c + k] = a.mul_f64(co) - b.mul_f64(s);
                value[p * c + k + half] = b.mul_f64(co) + a.mul_f64(s);
            }
        }
        self.push(r, c, value, Op::Rope { x, base })
    }

    /// Per-row low-rank quadratic map: with the row of `lambda` viewed as an
    /// r x c matrix L and the row of `x` as a c-vector v, computes L^T (L v).
    pub fn edge_low_rank(&mut self, lambda: NodeId, x: NodeId, rank: usize) -> NodeId {
        let (e, rc) = self.shape(lambda);
        let (e2, c) = self.shape(x);
        assert_eq!(e, e2, "edge count mismatch");
        assert_eq!(rc, rank * c, "lambda width must equal rank * cols");
        let mut value = vec![S::zero(); e * c];
        let lam = &self.nodes[lambda].value;
        let xv = &self.nodes[x].value;
        let mut t = vec![S::zero(); rank];
        for ed in 0..e {
            let l = &lam[ed * rc..(ed + 1) * rc];
            let v = &xv[ed * c..(ed + 1) * c];
            for (ri, ti) in t.iter_mut().enumerate() {
                let mut acc = S::zero();
                for j in 0..c {
                    acc = acc + l[ri * c + j] * v[j];
                }
                *ti = acc;
            }
            let out = &mut value[ed * c..(ed + 1) * c];
            for (ri, &ti) in t.iter().enumerate() {
                for j in 0..c {
                    out[j] = out[j] + l[ri * c + j] * ti;
                }
            }
        }
        self.push(e, c, value, Op::EdgeLowRank { lambda, x, rank })
    }

    /// Row-wise dot product of two equally shaped matrices -> m x 1.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shape mismatch");
        let (r, c) = self.shape(a);
        let mut value = Vec::with_capacity(r);
        for i in 0..r {
            let mut acc = S::zero();
            for j in 0..c {
                acc = acc + self.nodes[a].value[i * c + j] * self.nodes[b].value[i * c + j];
            }
            value.push(acc);
        }
        self.push(r, 1, value, Op::RowDot(a, b))
    }

    /// Softmax over contiguous segments of a column vector. `seg` assigns a
    /// nondecreasing segment id to every row.
    pub fn segment_softmax(&mut self, x: NodeId, seg: Rc<Vec<usize>>) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(c, 1, "segment softmax expects a column");
        assert_eq!(r, seg.len(), "segment id length mismatch");
        debug_assert!(seg.windows(2).all(|w| w[0] <= w[1]));
        let src = &self.nodes[x].value;
        let mut value = vec![S::zero(); r];
        let mut start = 0;
        while start < r {
            let mut end = start + 1;
            while end < r && seg[end] == seg[start] {
                end += 1;
            }
            let mut buf = Vec::with_capacity(end - start);
            softmax_into(&src[start..end], &mut buf);
            value[start..end].copy_from_slice(&buf);
            start = end;
        }
        self.push(r, 1, value, Op::SegmentSoftmax { x, seg })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// the logits; log-sum-exp is shift-stabilized by a primal constant.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Rc<Vec<usize>>) -> NodeId {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "target count mismatch");
        let src = &self.nodes[logits].value;
        let mut total = S::zero();
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let t = targets[i];
            assert!(t < c, "target id out of range");
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.val()));
            let mut sum = S::zero();
            for &v in row {
                sum = sum + (v - S::from_f64(m)).exp();
            }
            let lse = S::from_f64(m) + sum.ln();
            total = total + lse - row[t];
        }
        let value = vec![total.mul_f64(1.0 / r as f64)];
        self.push(1, 1, value, Op::CrossEntropyMean { logits, targets })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a].value.iter().fold(S::zero(), |acc, &v| acc + v);
        self.push(1, 1, vec![total], Op::SumAll(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        let total = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        self.push(1, 1, vec![total], Op::Dot(a, b))
    }

    /// Reverse pass from a scalar output node. Returns the flat adjoint
    /// vector over parameter leaves (length `param_dim`).
    pub fn backward(&mut self, output: NodeId, param_dim: usize) -> Vec<S> {
        assert_eq!(
            self.nodes[output].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut adjoints: Vec<Vec<S>> = self
            .nodes
            .iter()
            .map(|n| vec![S::zero(); n.value.len()])
            .collect();
        let mut grad = vec![S::zero(); param_dim];
        adjoints[output][0] = S::one();

        for id in (0..=output).rev() {
            let node_adj = std::mem::take(&mut adjoints[id]);
            if node_adj.iter().all(|v| v.val() == 0.0 && v.tangent() == 0.0) {
                continue;
            }
            let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
            match self.nodes[id].op.clone() {
                Op::Const => {}
                Op::Leaf { offset } => {
                    for (k, &a) in node_adj.iter().enumerate() {
                        grad[offset + k] = grad[offset + k] + a;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints[a], &node_adj);
                    accumulate(&mut adjoints[b], &node_adj);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints[a], &node_adj);
                    for (dst, &s) in adjoints[b].iter_mut().zip(&node_adj) {
                        *dst = *dst - s;
                    }
                }
                Op::Mul(a, b) => {
                    for k in 0..node_adj.len() {
                        let bv = self.nodes[b].value[k];
                        adjoints[a][k] = adjoints[a][k] + node_adj[k] * bv;
                    }
                    for k in 0..node_adj.len() {
                        let av = self.nodes[a].value[k];
                        adjoints[b][k] = adjoints[b][k] + node_adj[k] * av;
                    }
                }
                Op::Scale(a, c) => {
                    for (dst, &s) in adjoints[a].iter_mut().zip(&node_adj) {
                        *dst = *dst + s.mul_f64(c);
                    }
                }
                Op::AddRowBroadcast(a, row) => {
                    accumulate(&mut adjoints[a], &node_adj);
                    for i in 0..rows {
                        for j in 0..cols {
                            adjoints[row][j] = adjoints[row][j] + node_adj[i * cols + j];
                        }
                    }
                }
                Op::MulColBroadcast(a, col) => {
                    for i in 0..rows {
                        let s = self.nodes[col].value[i];
                        let mut acc = S::zero();
                        for j in 0..cols {
                            let g = node_adj[i * cols + j];
                            adjoints[a][i * cols + j] = adjoints[a][i * cols + j] + g * s;
                            acc = acc + g * self.nodes[a].value[i * cols + j];
                        }
                        adjoints[col][i] = adjoints[col][i] + acc;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(a);
                    let (_, n) = self.shape(b);
                    // a_bar += ybar * b^T
                    let bt = transpose_kernel(&self.nodes[b].value, k, n);
                    let da = matmul_kernel(&node_adj, m, n, &bt, k);
                    accumulate(&mut adjoints[a], &da);
                    // b_bar += a^T * ybar
                    let at = transpose_kernel(&self.nodes[a].value, m, k);
                    let db = matmul_kernel(&at, k, m, &node_adj, n);
                    accumulate(&mut adjoints[b], &db);
                }
                Op::Transpose(a) => {
                    let (ar, ac) = self.shape(a);
                    for i in 0..ar {
                        for j in 0..ac {
                            adjoints[a][i * ac + j] =
                                adjoints[a][i * ac + j] + node_adj[j * ar + i];
                        }
                    }
                }
                Op::Softplus(a) => {
                    for k in 0..node_adj.len() {
                        let d = sigmoid(self.nodes[a].value[k]);
                        adjoints[a][k] = adjoints[a][k] + node_adj[k] * d;
                    }
                }
                Op::Gelu(a) => {
                    for k in 0..node_adj.len() {
                        let d = gelu_derivative(self.nodes[a].value[k]);
                        adjoints[a][k] = adjoints[a][k] + node_adj[k] * d;
                    }
                }
                Op::SoftmaxRows(a) => {
                    for i in 0..rows {
                        let p = &self.nodes[id].value[i * cols..(i + 1) * cols];
                        let g = &node_adj[i * cols..(i + 1) * cols];
                        let mut inner = S::zero();
                        for j in 0..cols {
                            inner = inner + g[j] * p[j];
                        }
                        for j in 0..cols {
                            adjoints[a][i * cols + j] =
                                adjoints[a][i * cols + j] + p[j] * (g[j] - inner);
                        }
                    }
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let inv_n = 1.0 / cols as f64;
                    for i in 0..rows {
                        let row = &self.nodes[x].value[i * cols..(i + 1) * cols];
                        let (xhat, std) = layer_norm_row(row);
                        let g = &node_adj[i * cols..(i + 1) * cols];
                        let mut mean_g = S::zero();
                        let mut mean_gx = S::zero();
                        let mut gg = vec![S::zero(); cols];
                        for j in 0..cols {
                            let gj = g[j] * self.nodes[gamma].value[j];
                            gg[j] = gj;
                            mean_g = mean_g + gj;
                            mean_gx = mean_gx + gj * xhat[j];
                        }
                        mean_g = mean_g.mul_f64(inv_n);
                        mean_gx = mean_gx.mul_f64(inv_n);
                        for j in 0..cols {
                            let dx = (gg[j] - mean_g - xhat[j] * mean_gx) / std;
                            adjoints[x][i * cols + j] = adjoints[x][i * cols + j] + dx;
                            adjoints[gamma][j] = adjoints[gamma][j] + g[j] * xhat[j];
                            adjoints[beta][j] = adjoints[beta][j] + g[j];
                        }
                    }
                }
                Op::GroupRowNorm { x, group_cols } => {
                    let total = rows * cols / group_cols;
                    for gidx in 0..total {
                        let base = gidx * group_cols;
                        let xg = &self.nodes[x].value[base..base + group_cols];
                        let norm_sq = xg.iter().fold(S::zero(), |acc, &v| acc + v * v);
                        if norm_sq.val() > 0.0 {
                            let norm = norm_sq.sqrt();
                            let y = &self.nodes[id].value[base..base + group_cols];
                            let g = &node_adj[base..base + group_cols];
                            let mut ydotg = S::zero();
                            for j in 0..group_cols {
                                ydotg = ydotg + y[j] * g[j];
                            }
                            for j in 0..group_cols {
                                let dx = (g[j] - y[j] * ydotg) / norm;
                                adjoints[x][base + j] = adjoints[x][base + j] + dx;
                            }
                        } else {
                            // Zero groups pass through; subgradient one.
                            for j in 0..group_cols {
                                adjoints[x][base + j] = adjoints[x][base + j] + node_adj[base + j];
                            }
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            adjoints[x][i * cols + j] =
                                adjoints[x][i * cols + j] + node_adj[k * cols + j];
                        }
                    }
                }
                Op::ScatterAddRows { x, idx } => {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            adjoints[x][k * cols + j] =
                                adjoints[x][k * cols + j] + node_adj[i * cols + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in &parts {
                        let (pr, pc) = self.shape(p);
                        for i in 0..pr {
                            for j in 0..pc {
                                adjoints[p][i * pc + j] =
                                    adjoints[p][i * pc + j] + node_adj[i * cols + start + j];
                            }
                        }
                        start += pc;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (_, xc) = self.shape(x);
                    for i in 0..rows {
                        for j in 0..cols {
                            adjoints[x][i * xc + start + j] =
                                adjoints[x][i * xc + start + j] + node_adj[i * cols + j];
                        }
                    }
                }
                Op::Rope { x, base } => {
                    // Transpose of a rotation: rotate the adjoint back.
                    let half = cols / 2;
                    for p in 0..rows {
                        for k in 0..half {
                            let theta = rope_angle(p, k, half, base);
                            let (s, co) = theta.sin_cos();
                            let ga = node_adj[p * cols + k];
                            let gb = node_adj[p * cols + k + half];
                            adjoints[x][p * cols + k] =
                                adjoints[x][p * cols + k] + ga.mul_f64(co) + gb.mul_f64(s);
                            adjoints[x][p * cols + k + half] = adjoints[x][p * cols + k + half]
                                - ga.mul_f64(s)
                                + gb.mul_f64(co);
                        }
                    }
                }
                Op::EdgeLowRank { lambda, x, rank } => {
                    let (e, rc) = self.shape(lambda);
                    let c = cols;
                    let mut t = vec![S::zero(); rank];
                    let mut tbar = vec![S::zero(); rank];
                    for ed in 0..e {
                        let l = self.nodes[lambda].value[ed * rc..(ed + 1) * rc].to_vec();
                        let v = self.nodes[x].value[ed * c..(ed + 1) * c].to_vec();
                        let g = &node_adj[ed * c..(ed + 1) * c];
                        // Recompute t = L v; tbar = L g.
                        for ri in 0..rank {
                            let mut acc_t = S::zero();
                            let mut acc_tb = S::zero();
                            for j in 0..c {
                                acc_t = acc_t + l[ri * c + j] * v[j];
                                acc_tb = acc_tb + l[ri * c + j] * g[j];
                            }
                            t[ri] = acc_t;
                            tbar[ri] = acc_tb;
                        }
                        // x_bar += L^T tbar; lambda_bar += t g^T + tbar v^T.
                        for ri in 0..rank {
                            for j in 0..c {
                                adjoints[x][ed * c + j] =
                                    adjoints[x][ed * c + j] + l[ri * c + j] * tbar[ri];
                                adjoints[lambda][ed * rc + ri * c + j] = adjoints[lambda]
                                    [ed * rc + ri * c + j]
                                    + t[ri] * g[j]
                                    + tbar[ri] * v[j];
                            }
                        }
                    }
                }
                Op::RowDot(a, b) => {
                    let (_, c) = self.shape(a);
                    for i in 0..rows {
                        let g = node_adj[i];
                        for j in 0..c {
                            adjoints[a][i * c + j] =
                                adjoints[a][i * c + j] + g * self.nodes[b].value[i * c + j];
                            adjoints[b][i * c + j] =
                                adjoints[b][i * c + j] + g * self.nodes[a].value[i * c + j];
                        }
                    }
                }
                Op::SegmentSoftmax { x, seg } => {
                    let mut start = 0;
                    while start < rows {
                        let mut end = start + 1;
                        while end < rows && seg[end] == seg[start] {
                            end += 1;
                        }
                        let p = &self.nodes[id].value[start..end];
                        let g = &node_adj[start..end];
                        let mut inner = S::zero();
                        for k in 0..p.len() {
                            inner = inner + g[k] * p[k];
                        }
                        for k in 0..p.len() {
                            adjoints[x][start + k] =
                                adjoints[x][start + k] + p[k] * (g[k] - inner);
                        }
                        start = end;
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let (r, c) = self.shape(logits);
                    let g = node_adj[0].mul_f64(1.0 / r as f64);
                    for i in 0..r {
                        let row = &self.nodes[logits].value[i * c..(i + 1) * c];
                        let mut p = Vec::with_capacity(c);
                        softmax_into(row, &mut p);
                        for j in 0..c {
                            let indicator = if j == targets[i] { S::one() } else { S::zero() };
                            adjoints[logits][i * c + j] =
                                adjoints[logits][i * c + j] + g * (p[j] - indicator);
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = node_adj[0];
                    for dst in adjoints[a].iter_mut() {
                        *dst = *dst + g;
                    }
                }
                Op::Dot(a, b) => {
                    let g = node_adj[0];
                    for k in 0..adjoints[a].len() {
                        let bv = self.nodes[b].value[k];
                        adjoints[a][k] = adjoints[a][k] + g * bv;
                    }
                    for k in 0..adjoints[b].len() {
                        let av = self.nodes[a].value[k];
                        adjoints[b][k] = adjoints[b][k] + g * av;
                    }
                }
            }
        }
        grad
    }
}

#[inline]
pub fn rope_angle(position: usize, k: usize, half: usize, base: f64) -> f64 {
    position as f64 * base.powf(-(k as f64) / half as f64)
}

fn accumulate<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn matmul_kernel<S: Real>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    out
}

fn transpose_kernel<S: Real>(a: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_into<S: Real>(row: &[S], out: &mut Vec<S>) {
    let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.val()));
    let mut sum = S::zero();
    let start = out.len();
    for &v in row {
        let e = (v - S::from_f64(m)).exp();
        out.push(e);
        sum = sum + e;
    }
    for v in out[start..].iter_mut() {
        *v = *v / sum;
    }
}

/// Normalized row and its standard deviation (population variance + eps).
fn layer_norm_row<S: Real>(row: &[S]) -> (Vec<S>, S) {
    let n = row.len();
    let mut mean = S::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean.mul_f64(1.0 / n as f64);
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var.mul_f64(1.0 / n as f64);
    let std = (var + S::from_f64(LAYER_NORM_EPS)).sqrt();
    let xhat = row.iter().map(|&v| (v - mean) / std).collect();
    (xhat, std)
}
