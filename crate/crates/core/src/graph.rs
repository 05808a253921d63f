//! Graph construction, Laplacians, Fiedler values, and the closed-form
//! spectral results for window-path and cycle-power families, including the
//! block (vector-valued) Laplacian.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{sym_eig, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Directed weighted graph with positive scalar edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &(src, dst, weight) in &edges {
            if src >= n || dst >= n {
                return Err(Error::Parameter(format!(
                    "edge ({src},{dst}) out of range for {n} nodes"
                )));
            }
            if !(weight > 0.0) {
                return Err(Error::Parameter(format!(
                    "edge ({src},{dst}) has non-positive weight {weight}"
                )));
            }
            if !seen.insert((src, dst)) {
                return Err(Error::Parameter(format!("duplicate edge ({src},{dst})")));
            }
        }
        Ok(Graph {
            n,
            edges: edges
                .into_iter()
                .map(|(src, dst, weight)| Edge { src, dst, weight })
                .collect(),
        })
    }

    pub fn edgeless(n: usize) -> Self {
        Graph { n, edges: vec![] }
    }

    /// Complete graph with unit weights, both directions per pair.
    pub fn complete(n: usize) -> Self {
        let mut edges = vec![];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    edges.push(Edge { src: i, dst: j, weight: 1.0 });
                }
            }
        }
        Graph { n, edges }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> Matrix {
        let mut w = Matrix::zeros(self.n, self.n);
        for e in &self.edges {
            w.set(e.src, e.dst, e.weight);
        }
        w
    }

    /// Connectivity of the undirected support, ignoring self-loops.
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in &self.edges {
            if e.src == e.dst {
                continue;
            }
            let (a, b) = (find(&mut parent, e.src), find(&mut parent, e.dst));
            if a != b {
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (1..self.n).all(|i| find(&mut parent, i) == root)
    }

    /// Line-oriented text export: header `n <N>`, then one
    /// `edge <src> <dst> <weight>` per line. Weights use the shortest decimal
    /// form that round-trips exactly to the same f64.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n {}", self.n);
        for e in &self.edges {
            let _ = writeln!(out, "edge {} {} {}", e.src, e.dst, e.weight);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty graph text".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("n") {
            return Err(Error::Format("graph text must start with `n <N>`".into()));
        }
        let n: usize = parts
            .next()
            .ok_or_else(|| Error::Format("missing node count".into()))?
            .parse()
            .map_err(|_| Error::Format("bad node count".into()))?;
        let mut edges = vec![];
        for line in lines {
            let mut parts = line.split_whitespace();
            if parts.next() != Some("edge") {
                return Err(Error::Format(format!("bad line: {line}")));
            }
            let src: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad src in: {line}")))?;
            let dst: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad dst in: {line}")))?;
            let weight: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad weight in: {line}")))?;
            edges.push((src, dst, weight));
        }
        Graph::new(n, edges)
    }
}

/// Window-path graph: nodes 0..n, ordered edges (i,j) for 0 < |i-j| <= w.
pub fn build_window_path(n: usize, w: usize) -> Result<Graph> {
    if w == 0 || w >= n {
        return Err(Error::Parameter(format!(
            "window-path requires 1 <= w < n, got n={n}, w={w}"
        )));
    }
    let mut edges = vec![];
    for i in 0..n {
        for j in 0..n {
            if i != j && i.abs_diff(j) <= w {
                edges.push((i, j, 1.0));
            }
        }
    }
    Graph::new(n, edges)
}

/// Cycle-power graph: node i connects to i +- 1..=w modulo n. The closed-form
/// spectrum below assumes w < n/2, so construction enforces it.
pub fn build_cycle_power(n: usize, w: usize) -> Result<Graph> {
    if w == 0 || 2 * w >= n {
        return Err(Error::Parameter(format!(
            "cycle-power requires 1 <= w < n/2, got n={n}, w={w}"
        )));
    }
    let mut edges = vec![];
    for i in 0..n {
        for k in 1..=w {
            edges.push((i, (i + k) % n, 1.0));
            edges.push((i, (i + n - k) % n, 1.0));
        }
    }
    Graph::new(n, edges)
}

/// Graph Laplacian L = D - W (out-degree convention) and its symmetrization
/// L_sym = (L + L^T)/2. Self-loops cancel between D and W, leaving L
/// untouched.
pub fn laplacians(g: &Graph) -> (Matrix, Matrix) {
    let n = g.n();
    let mut l = Matrix::zeros(n, n);
    for e in g.edges() {
        if e.src == e.dst {
            continue;
        }
        l.set(e.src, e.dst, l.get(e.src, e.dst) - e.weight);
        l.set(e.src, e.src, l.get(e.src, e.src) + e.weight);
    }
    let mut l_sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            l_sym.set(i, j, 0.5 * (l.get(i, j) + l.get(j, i)));
        }
    }
    (l, l_sym)
}

/// Second-smallest eigenvalue of L_sym (algebraic connectivity). Returns 0
/// for disconnected graphs and for the degenerate single-node graph.
pub fn fiedler_value(g: &Graph) -> Result<f64> {
    if g.n() < 2 {
        return Ok(0.0);
    }
    let (_, l_sym) = laplacians(g);
    let e = sym_eig(&l_sym)?;
    let lam = e.eigenvalues[1];
    // Clamp the tiny negative roundoff a PSD spectrum can produce.
    Ok(if lam < 0.0 && lam > -1e-10 { 0.0 } else { lam })
}

/// Closed-form Fiedler value of the cycle-power graph:
/// lambda_1 = 4 * sum_{j=1..w} sin^2(pi j / n).
pub fn cycle_power_lambda1(n: usize, w: usize) -> Result<f64> {
    if w == 0 || 2 * w >= n {
        return Err(Error::Parameter(format!(
            "cycle-power closed form requires 1 <= w < n/2, got n={n}, w={w}"
        )));
    }
    let mut sum = 0.0;
    for j in 1..=w {
        let s = (std::f64::consts::PI * j as f64 / n as f64).sin();
        sum += s * s;
    }
    Ok(4.0 * sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiedlerBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Two-sided bound on the Fiedler value of the window-path graph:
/// the lower bound is half the upper, both from partial sine sums at
/// half-angle, valid for w < n/2.
pub fn path_fiedler_bounds(n: usize, w: usize) -> Result<FiedlerBounds> {
    if w == 0 || 2 * w >= n {
        return Err(Error::Parameter(format!(
            "path Fiedler bounds require 1 <= w < n/2, got n={n}, w={w}"
        )));
    }
    let mut sum = 0.0;
    for j in 1..=w {
        let s = (std::f64::consts::PI * j as f64 / (2.0 * n as f64)).sin();
        sum += s * s;
    }
    Ok(FiedlerBounds {
        lower: 2.0 * sum,
        upper: 4.0 * sum,
    })
}

/// Graph whose edges carry d x d symmetric positive-definite weight blocks.
#[derive(Debug, Clone)]
pub struct BlockGraph {
    n: usize,
    d: usize,
    edges: Vec<(usize, usize, Matrix)>,
}

impl BlockGraph {
    /// Every block must be symmetric positive definite (minimum eigenvalue
    /// above 1e-12). Self-loops are rejected: the block degree sums over
    /// j != i, so a diagonal block would not cancel the way scalar
    /// self-loops do.
    pub fn new(n: usize, d: usize, edges: Vec<(usize, usize, Matrix)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (src, dst, block) in &edges {
            if *src >= n || *dst >= n {
                return Err(Error::Parameter(format!(
                    "edge ({src},{dst}) out of range for {n} nodes"
                )));
            }
            if *src == *dst {
                return Err(Error::Parameter(format!(
                    "self-loop block at node {src} is not representable"
                )));
            }
            if block.rows() != d || block.cols() != d {
                return Err(Error::Dimension(format!(
                    "block on ({src},{dst}) is {}x{}, expected {d}x{d}",
                    block.rows(),
                    block.cols()
                )));
            }
            let e = sym_eig(block)?;
            if e.eigenvalues[0] <= 1e-12 {
                return Err(Error::Definiteness(format!(
                    "block on ({src},{dst}) has minimum eigenvalue {:.3e}",
                    e.eigenvalues[0]
                )));
            }
            if !seen.insert((*src, *dst)) {
                return Err(Error::Parameter(format!("duplicate edge ({src},{dst})")));
            }
        }
        Ok(BlockGraph { n, d, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edges(&self) -> &[(usize, usize, Matrix)] {
        &self.edges
    }

    /// Undirected-support connectivity of the underlying scalar structure.
    pub fn is_connected(&self) -> bool {
        let scalar_edges: Vec<(usize, usize, f64)> = self
            .edges
            .iter()
            .map(|(s, t, _)| (*s, *t, 1.0))
            .collect();
        match Graph::new(self.n, scalar_edges) {
            Ok(g) => g.is_connected(),
            Err(_) => false,
        }
    }
}

/// Block Laplacian L = D - W in R^{nd x nd}, with per-node out-degree blocks
/// D_i = sum_{j != i} W_{i,j}, plus its symmetrization.
pub fn block_laplacian(bg: &BlockGraph) -> (Matrix, Matrix) {
    let (n, d) = (bg.n(), bg.d());
    let size = n * d;
    let mut l = Matrix::zeros(size, size);
    for (src, dst, block) in bg.edges() {
        for a in 0..d {
            for b in 0..d {
                let v = block.get(a, b);
                let (ri, ci) = (src * d + a, dst * d + b);
                l.set(ri, ci, l.get(ri, ci) - v);
                let (rd, cd) = (src * d + a, src * d + b);
                l.set(rd, cd, l.get(rd, cd) + v);
            }
        }
    }
    let mut l_sym = Matrix::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            l_sym.set(i, j, 0.5 * (l.get(i, j) + l.get(j, i)));
        }
    }
    (l, l_sym)
}

/// Count eigenvalues below the documented zero threshold
/// 1e-9 * max(1, lambda_max).
pub fn count_zero_eigenvalues(eigenvalues: &[f64]) -> usize {
    let lam_max = eigenvalues.last().copied().unwrap_or(0.0);
    let tol = 1e-9 * lam_max.abs().max(1.0);
    eigenvalues.iter().filter(|v| v.abs() <= tol).count()
}
