//! Dense row-major matrix kernels and a symmetric eigensolver.
//!
//! Everything downstream (Laplacians, filters, mechanisms) builds on these.
//! Sizes here are desk scale, so the kernels favor transparency over BLAS
//! performance: plain loops ordered for cache-friendly row-major access.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(&other.data) {
            *v += w;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "sub: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(&other.data) {
            *v -= w;
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }
}

/// Textbook product a*b. Loop order i-k-j keeps the inner loop contiguous.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Matrix-vector product into a fresh vector; `x.len()` must equal `a.cols`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.cols {
        return Err(Error::Dimension(format!(
            "matvec: {}x{} times vector of length {}",
            a.rows,
            a.cols,
            x.len()
        )));
    }
    let mut out = vec![0.0; a.rows];
    for i in 0..a.rows {
        let row = &a.data[i * a.cols..(i + 1) * a.cols];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Eigenvalues sorted ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, aligned with `eigenvalues`.
    pub eigenvectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized defensively (it must already be symmetric within
/// 1e-12 relative to its magnitude). Eigenvalues come back ascending with
/// orthonormal eigenvector columns in matching order.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomposition> {
    if a.rows != a.cols {
        return Err(Error::Dimension(format!(
            "sym_eig requires square input, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let scale = a.max_abs().max(1.0);
    if a.max_asymmetry() > 1e-12 * scale {
        return Err(Error::Symmetry(format!(
            "input asymmetry {:.3e} exceeds tolerance",
            a.max_asymmetry()
        )));
    }
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: vec![],
            eigenvectors: Matrix::zeros(0, 0),
        });
    }

    // Work on the symmetrized copy.
    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    let mut q = Matrix::identity(n);
    let off_tol = JACOBI_OFF_TOL * m.frobenius_norm().max(1.0);

    let mut converged = false;
    let mut off = off_frobenius(&m);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off <= off_tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = m.get(p, r);
                if apr.abs() <= off_tol / (n as f64) * 1e-4 {
                    continue;
                }
                let app = m.get(p, p);
                let arr = m.get(r, r);
                // Classic Jacobi rotation choosing the smaller angle.
                let tau = (arr - app) / (2.0 * apr);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut m, p, r, c, s);
                rotate_columns(&mut q, p, r, c, s);
            }
        }
        off = off_frobenius(&m);
    }
    if !converged && off > off_tol {
        return Err(Error::Convergence {
            residual: off,
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            eigenvectors.set(row, new_col, q.get(row, old_col));
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_frobenius(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = m.get(i, j);
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// Two-sided rotation of a symmetric matrix in rows/cols p and r.
fn rotate(m: &mut Matrix, p: usize, r: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkr = m.get(k, r);
        m.set(k, p, c * mkp - s * mkr);
        m.set(k, r, s * mkp + c * mkr);
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mrk = m.get(r, k);
        m.set(p, k, c * mpk - s * mrk);
        m.set(r, k, s * mpk + c * mrk);
    }
}

/// Accumulate the rotation into the eigenvector columns.
fn rotate_columns(q: &mut Matrix, p: usize, r: usize, c: f64, s: f64) {
    let n = q.rows();
    for k in 0..n {
        let qkp = q.get(k, p);
        let qkr = q.get(k, r);
        q.set(k, p, c * qkp - s * qkr);
        q.set(k, r, s * qkp + c * qkr);
    }
}

/// Cholesky factorization; returns the lower factor or a definiteness error.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::Dimension("cholesky requires square input".into()));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Definiteness(format!(
                        "pivot {sum:.3e} at index {i} is not positive"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve a*x = b for symmetric positive-definite a via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "solve_spd: {}x{} vs rhs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let l = cholesky(a)?;
    let n = a.rows;
    let mut x = b.clone();
    // Forward substitution L y = b, column by column.
    for col in 0..b.cols {
        for i in 0..n {
            let mut sum = x.get(i, col);
            for k in 0..i {
                sum -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
        // Back substitution L^T x = y.
        for i in (0..n).rev() {
            let mut sum = x.get(i, col);
            for k in (i + 1)..n {
                sum -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(e: &EigenDecomposition) -> Matrix {
        let n = e.eigenvalues.len();
        let q = &e.eigenvectors;
        let mut lam = Matrix::zeros(n, n);
        for i in 0..n {
            lam.set(i, i, e.eigenvalues[i]);
        }
        matmul(&matmul(q, &lam).unwrap(), &q.transpose()).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = Matrix::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.0, 4.0, -1.0]]).unwrap();
        let i3 = Matrix::identity(3);
        assert_eq!(matmul(&a, &i3).unwrap(), a);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_diagonal_inverse() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let ainv = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.25]]).unwrap();
        let prod = matmul(&a, &ainv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(2)) <= 1e-14);
    }

    #[test]
    fn matmul_dimension_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn sym_eig_identity() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        for v in &e.eigenvalues {
            assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sym_eig_two_by_two_closed_form() {
        let a = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.eigenvalues[0] - 0.0).abs() <= 1e-12);
        assert!((e.eigenvalues[1] - 2.0).abs() <= 1e-12);
        // Orthonormality and reconstruction.
        let qtq = matmul(&e.eigenvectors.transpose(), &e.eigenvectors).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(2)) <= 1e-10);
        assert!(reconstruct(&e).max_abs_diff(&a) <= 1e-8);
    }

    #[test]
    fn sym_eig_zero_matrix() {
        let e = sym_eig(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 4]);
    }

    #[test]
    fn sym_eig_rejects_non_square() {
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sym_eig_random_reconstruction_and_trace() {
        let mut rng = crate::rng::Rng::new(11);
        for n in [2usize, 3, 5, 8] {
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.uniform(-2.0, 2.0);
                    a.set(i, j, v);
                    a.set(j, i, v);
                }
            }
            let e = sym_eig(&a).unwrap();
            let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
            let sum: f64 = e.eigenvalues.iter().sum();
            assert!((trace - sum).abs() <= 1e-9 * trace.abs().max(1.0));
            assert!(reconstruct(&e).max_abs_diff(&a) <= 1e-8 * a.max_abs().max(1.0));
            let qtq = matmul(&e.eigenvectors.transpose(), &e.eigenvectors).unwrap();
            assert!(qtq.max_abs_diff(&Matrix::identity(n)) <= 1e-10);
            for w in e.eigenvalues.windows(2) {
                assert!(w[0] <= w[1] + 1e-12);
            }
        }
    }

    /// Brute-force determinant by cofactor expansion, usable up to ~8x8.
    fn det_bruteforce(a: &Matrix) -> f64 {
        let n = a.rows();
        if n == 1 {
            return a.get(0, 0);
        }
        let mut det = 0.0;
        for j in 0..n {
            let mut minor = Matrix::zeros(n - 1, n - 1);
            for r in 1..n {
                let mut cc = 0;
                for c in 0..n {
                    if c == j {
                        continue;
                    }
                    minor.set(r - 1, cc, a.get(r, c));
                    cc += 1;
                }
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * a.get(0, j) * det_bruteforce(&minor);
        }
        det
    }

    #[test]
    fn sym_eig_det_sign_matches_eigenvalue_product() {
        let mut rng = crate::rng::Rng::new(23);
        for n in [2usize, 4, 6, 8] {
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.uniform(-1.0, 1.0);
                    a.set(i, j, v);
                    a.set(j, i, v);
                }
            }
            let e = sym_eig(&a).unwrap();
            let prod: f64 = e.eigenvalues.iter().product();
            let det = det_bruteforce(&a);
            assert!((prod - det).abs() <= 1e-8 * det.abs().max(1.0));
        }
    }

    #[test]
    fn sym_eig_permutation_invariant_eigenvalues() {
        let mut rng = crate::rng::Rng::new(5);
        let n = 6;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.uniform(-1.0, 1.0);
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut b = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b.set(i, j, a.get(perm[i], perm[j]));
            }
        }
        let ea = sym_eig(&a).unwrap();
        let eb = sym_eig(&b).unwrap();
        for (x, y) in ea.eigenvalues.iter().zip(&eb.eigenvalues) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn solve_spd_identity_and_scalar() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let x = solve_spd(&Matrix::identity(2), &b).unwrap();
        assert!(x.max_abs_diff(&b) <= 1e-14);

        let a = Matrix::from_rows(&[vec![4.0]]).unwrap();
        let rhs = Matrix::from_rows(&[vec![8.0]]).unwrap();
        let x = solve_spd(&a, &rhs).unwrap();
        assert!((x.get(0, 0) - 2.0).abs() <= 1e-14);
    }

    #[test]
    fn solve_spd_two_node_smoothing_system() {
        // (I + L) x = b for the two-node path, rho = 1. Hand solve:
        // 2*x0 - x1 = 0 and -x0 + 2*x1 = 1 give x = (1/3, 2/3).
        let a = Matrix::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0 / 3.0).abs() <= 1e-12);
        assert!((x.get(1, 0) - 2.0 / 3.0).abs() <= 1e-12);
        let resid = matmul(&a, &x).unwrap().max_abs_diff(&b);
        assert!(resid <= 1e-9);
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(solve_spd(&a, &b), Err(Error::Definiteness(_))));
    }
}
