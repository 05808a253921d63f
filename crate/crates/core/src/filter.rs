//! Graph-signal energy, its gradient, the low-pass filter update, iterated
//! filtering with convergence diagnostics, and exact Laplacian smoothing.

use crate::error::{Error, Result};
use crate::graph::{block_laplacian, laplacians, BlockGraph, Graph};
use crate::report::fmt_g;
use crate::tensor::{matmul, solve_spd, sym_eig, Matrix};

/// Per-node signal values: `n` nodes, `d` values per node (1 for scalar
/// signals), stored as an n x d matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub n: usize,
    pub d: usize,
    pub values: Matrix,
}

impl Signal {
    pub fn scalar(values: &[f64]) -> Self {
        Signal {
            n: values.len(),
            d: 1,
            values: Matrix::column(values),
        }
    }

    pub fn new(values: Matrix) -> Self {
        Signal {
            n: values.rows(),
            d: values.cols(),
            values,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }

    pub fn mean(&self) -> f64 {
        let data = self.values.data();
        data.iter().sum::<f64>() / data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.values.frobenius_norm()
    }
}

fn check_scalar_signal(g: &Graph, u: &Signal) -> Result<()> {
    if u.n != g.n() || u.d != 1 {
        return Err(Error::Dimension(format!(
            "expected scalar signal on {} nodes, got n={}, d={}",
            g.n(),
            u.n,
            u.d
        )));
    }
    Ok(())
}

/// Signal energy (1/2) sum_ij W_ij (u_i - u_j)^2, equal to u^T L u.
pub fn energy(g: &Graph, u: &Signal) -> Result<f64> {
    check_scalar_signal(g, u)?;
    let vals = u.as_slice();
    let mut total = 0.0;
    for e in g.edges() {
        let diff = vals[e.src] - vals[e.dst];
        total += 0.5 * e.weight * diff * diff;
    }
    Ok(total)
}

/// Energy gradient 2 * L_sym * u.
pub fn energy_gradient(g: &Graph, u: &Signal) -> Result<Signal> {
    check_scalar_signal(g, u)?;
    let (_, l_sym) = laplacians(g);
    let grad = matmul(&l_sym, &u.values)?.scale(2.0);
    Ok(Signal::new(grad))
}

/// One low-pass filter update u' = (I - 2 eta L_sym) u.
pub fn filter_step(g: &Graph, u: &Signal, eta: f64) -> Result<Signal> {
    check_scalar_signal(g, u)?;
    if eta < 0.0 {
        return Err(Error::Parameter(format!("eta must be >= 0, got {eta}")));
    }
    let grad = energy_gradient(g, u)?;
    let stepped = u.values.sub(&grad.values.scale(eta))?;
    Ok(Signal::new(stepped))
}

/// Largest step size that keeps the filter non-oscillating:
/// 1 / (2 lambda_max(L_sym)).
pub fn non_oscillation_threshold(g: &Graph) -> Result<f64> {
    let (_, l_sym) = laplacians(g);
    let e = sym_eig(&l_sym)?;
    let lam_max = e.eigenvalues.last().copied().unwrap_or(0.0);
    if lam_max <= 1e-14 {
        return Err(Error::DegenerateSpectrum(
            "graph has no edges; lambda_max is zero".into(),
        ));
    }
    Ok(1.0 / (2.0 * lam_max))
}

/// Diagnostics for an iterated filter run.
#[derive(Debug, Clone)]
pub struct FilterReport {
    pub iterations: usize,
    pub final_signal: Signal,
    /// ||u_k - mean(u_0) 1|| after each step (index 0 is the initial state).
    pub distance_to_mean: Vec<f64>,
    pub energy: Vec<f64>,
    /// omega_1 = 1 - 2 eta lambda_1; the per-iterate contraction factor.
    pub rate_bound: f64,
    /// True when eta exceeded the non-oscillation threshold.
    pub oscillatory: bool,
    /// ||u_0||, the prefactor in the per-iterate bound omega_1^k * ||u_0||.
    pub initial_norm: f64,
}

impl FilterReport {
    /// CSV with columns (step, distance_to_mean, energy, bound).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,distance_to_mean,energy,bound\n");
        for k in 0..self.distance_to_mean.len() {
            let bound = self.rate_bound.powi(k as i32) * self.initial_norm;
            out.push_str(&format!(
                "{},{},{},{}\n",
                k,
                fmt_g(self.distance_to_mean[k]),
                fmt_g(self.energy[k]),
                fmt_g(bound)
            ));
        }
        out
    }
}

/// Apply `steps` filter updates on a connected graph, recording distance to
/// the mean and energy at every iterate. A step size above the
/// non-oscillation threshold is allowed but flagged.
pub fn filter_iterate(g: &Graph, u: &Signal, eta: f64, steps: usize) -> Result<FilterReport> {
    check_scalar_signal(g, u)?;
    if !g.is_connected() {
        return Err(Error::Disconnected(
            "filter iteration converges to the mean only on connected graphs".into(),
        ));
    }
    let threshold = non_oscillation_threshold(g)?;
    let oscillatory = eta > threshold;
    let (_, l_sym) = laplacians(g);
    let e = sym_eig(&l_sym)?;
    let lambda1 = e.eigenvalues[1];
    let rate_bound = 1.0 - 2.0 * eta * lambda1;

    let mean = u.mean();
    let distance = |s: &Signal| -> f64 {
        s.as_slice()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            .sqrt()
    };

    let mut current = u.clone();
    let mut distance_to_mean = vec![distance(&current)];
    let mut energies = vec![energy(g, &current)?];
    for _ in 0..steps {
        current = filter_step(g, &current, eta)?;
        distance_to_mean.push(distance(&current));
        energies.push(energy(g, &current)?);
    }
    Ok(FilterReport {
        iterations: steps,
        final_signal: current,
        distance_to_mean,
        energy: energies,
        rate_bound,
        oscillatory,
        initial_norm: u.norm(),
    })
}

/// Exact Laplacian smoothing (I + rho L)^{-1} x on an undirected graph.
pub fn laplacian_smoothing(g: &Graph, x: &Signal, rho: f64) -> Result<Signal> {
    if x.n != g.n() {
        return Err(Error::Dimension(format!(
            "signal has {} nodes, graph has {}",
            x.n,
            g.n()
        )));
    }
    if rho < 0.0 {
        return Err(Error::Parameter(format!("rho must be >= 0, got {rho}")));
    }
    let (l, _) = laplacians(g);
    if l.max_asymmetry() > 1e-12 {
        return Err(Error::Symmetry(
            "Laplacian smoothing requires an undirected graph (symmetric L)".into(),
        ));
    }
    let n = g.n();
    let mut system = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            system.set(i, j, system.get(i, j) + rho * l.get(i, j));
        }
    }
    let solved = solve_spd(&system, &x.values)?;
    Ok(Signal::new(solved))
}

/// Energy of a vector-valued signal under block edge weights:
/// (1/2) sum_{(i,j)} (u_i - u_j)^T W_{i,j} (u_i - u_j).
pub fn block_energy(bg: &BlockGraph, u: &Signal) -> Result<f64> {
    check_block_signal(bg, u)?;
    let d = bg.d();
    let vals = u.as_slice();
    let mut total = 0.0;
    for (src, dst, block) in bg.edges() {
        let us = &vals[src * d..(src + 1) * d];
        let ut = &vals[dst * d..(dst + 1) * d];
        for a in 0..d {
            for b in 0..d {
                total += 0.5 * (us[a] - ut[a]) * block.get(a, b) * (us[b] - ut[b]);
            }
        }
    }
    Ok(total)
}

/// One filter update u' = (I - 2 eta L_sym) u for the block Laplacian.
pub fn block_filter_step(bg: &BlockGraph, u: &Signal, eta: f64) -> Result<Signal> {
    check_block_signal(bg, u)?;
    let (_, l_sym) = block_laplacian(bg);
    let flat = Matrix::column(u.as_slice());
    let grad = matmul(&l_sym, &flat)?.scale(2.0 * eta);
    let next = flat.sub(&grad)?;
    let values = Matrix::from_vec(u.n, u.d, next.data().to_vec())?;
    Ok(Signal::new(values))
}

fn check_block_signal(bg: &BlockGraph, u: &Signal) -> Result<()> {
    if u.n != bg.n() || u.d != bg.d() {
        return Err(Error::Dimension(format!(
            "expected {}x{} signal, got {}x{}",
            bg.n(),
            bg.d(),
            u.n,
            u.d
        )));
    }
    Ok(())
}
