//! Small dense linear-algebra kernels.
//!
//! Every matrix the trainer and the oracle decompose is tiny (at most a few
//! hundred rows), so the kernels here favour accuracy and determinism over
//! asymptotic speed: a cyclic Jacobi eigensolver for symmetric matrices and a
//! one-sided (Hestenes) Jacobi SVD.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative off-diagonal Frobenius norm at which the Jacobi sweep stops.
pub const JACOBI_TOLERANCE: f64 = 1e-13;
/// Upper bound on the number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative eigenvalue separation below which two eigenvalues count as equal.
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;
/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected a square matrix")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (|m[{i},{j}] - m[{j},{i}]| = {gap:e})")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("two-by-two block has zero trace")]
    ZeroTrace,
}

/// Row-major dense real matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry().is_none()
    }

    /// Largest entrywise deviation from symmetry when it exceeds the tolerance.
    fn asymmetry(&self) -> Option<(usize, usize, f64)> {
        let scale = self.max_abs();
        let tol = SYMMETRY_TOLERANCE * scale;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > tol {
                    return Some((i, j, gap));
                }
            }
        }
        None
    }

    /// Largest entrywise absolute difference between two equally shaped matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Principal submatrix on the given index set.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), idx.len(), |i, j| self[(idx[i], idx[j])])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Eigenvalues (descending) and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    /// True when eigenvalue `i` and `i + 1` coincide within the degeneracy tolerance.
    pub fn degenerate_at(&self, i: usize) -> bool {
        let scale = self.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        match (self.eigenvalues.get(i), self.eigenvalues.get(i + 1)) {
            (Some(a), Some(b)) => (a - b).abs() <= DEGENERACY_TOLERANCE * scale.max(f64::MIN_POSITIVE),
            _ => false,
        }
    }

    pub fn has_degeneracy(&self) -> bool {
        (0..self.dim().saturating_sub(1)).any(|i| self.degenerate_at(i))
    }

    /// V·diag(λ)·Vᵀ
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let v = &self.eigenvectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| v[(i, k)] * self.eigenvalues[k] * v[(j, k)]).sum()
        })
    }
}

fn check_finite(m: &DenseMatrix) -> Result<(), LinalgError> {
    if m.as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Flips `v` so its largest-magnitude entry is positive. Near-ties resolve to
/// the lowest index.
fn canonical_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let lead = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-12))
        .unwrap_or(0);
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order; equal eigenvalues keep the order
/// in which the rotation sweep left them. Each eigenvector is signed so that
/// its largest-magnitude entry is positive.
pub fn sym_eig(m: &DenseMatrix) -> Result<SpectralDecomposition, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
    }
    check_finite(m)?;
    if let Some((i, j, gap)) = m.asymmetry() {
        return Err(LinalgError::NotSymmetric { i, j, gap });
    }
    let n = m.rows();
    // symmetrize exactly so the rotations see a truly symmetric input
    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    let tol = JACOBI_TOLERANCE * a.frobenius();

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off_norm(&a) > tol {
        return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep the lower Jacobi index first
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut e = v.column(src);
        canonical_sign(&mut e);
        for (r, x) in e.into_iter().enumerate() {
            vectors[(r, col)] = x;
        }
    }
    Ok(SpectralDecomposition { eigenvalues, eigenvectors: vectors })
}

/// Thin singular value decomposition `m = left · diag(singulars) · rightᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub left: DenseMatrix,
    pub singulars: Vec<f64>,
    pub right: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let r = self.singulars.len();
        DenseMatrix::from_fn(self.left.rows(), self.right.rows(), |i, j| {
            (0..r)
                .map(|k| self.left[(i, k)] * self.singulars[k] * self.right[(j, k)])
                .sum()
        })
    }
}

/// One-sided Jacobi SVD. For an `m × n` input the factors are `m × r` and
/// `n × r` with `r = min(m, n)`; both have orthonormal columns, including the
/// columns paired with zero singular values.
pub fn svd(m: &DenseMatrix) -> Result<Svd, LinalgError> {
    check_finite(m)?;
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd { left: t.right, singulars: t.singulars, right: t.left });
    }
    let (rows, cols) = (m.rows(), m.cols());
    let mut u = m.clone();
    let mut v = DenseMatrix::identity(cols);

    let mut converged = cols < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..rows {
                    let (x, y) = (u[(k, p)], u[(k, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (u[(k, p)], u[(k, q)]);
                    u[(k, p)] = c * x - s * y;
                    u[(k, q)] = s * x + c * y;
                }
                for k in 0..cols {
                    let (x, y) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|k| u[(k, j)] * u[(k, j)]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let sigma_max = norms.iter().fold(0.0_f64, |a, &b| a.max(b));
    let zero_floor = 1e-14 * sigma_max * (rows as f64);

    let mut left = DenseMatrix::zeros(rows, cols);
    let mut right = DenseMatrix::zeros(cols, cols);
    let mut singulars = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (col, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        let mut r = v.column(src);
        let lead_flip = {
            let mut probe = r.clone();
            canonical_sign(&mut probe);
            probe != r
        };
        if lead_flip {
            r.iter_mut().for_each(|x| *x = -*x);
        }
        let sign = if lead_flip { -1.0 } else { 1.0 };
        for (k, x) in r.into_iter().enumerate() {
            right[(k, col)] = x;
        }
        if sigma > zero_floor && sigma > 0.0 {
            for k in 0..rows {
                left[(k, col)] = sign * u[(k, src)] / sigma;
            }
            singulars.push(sigma);
        } else {
            singulars.push(sigma);
            pending.push(col);
        }
    }
    complete_orthonormal(&mut left, &pending);
    Ok(Svd { left, singulars, right })
}

/// Fills the listed columns with unit vectors orthogonal to all other columns
/// (Gram–Schmidt against the standard basis).
fn complete_orthonormal(q: &mut DenseMatrix, pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let rows = q.rows();
    let mut filled: Vec<usize> = (0..q.cols()).filter(|c| !pending.contains(c)).collect();
    let mut candidate = 0;
    for &col in pending {
        loop {
            assert!(candidate < rows, "ran out of basis vectors while completing");
            let mut w = vec![0.0; rows];
            w[candidate] = 1.0;
            candidate += 1;
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for &f in &filled {
                    let dot: f64 = (0..rows).map(|k| q[(k, f)] * w[k]).sum();
                    for (k, wk) in w.iter_mut().enumerate() {
                        *wk -= dot * q[(k, f)];
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (k, wk) in w.iter().enumerate() {
                    q[(k, col)] = wk / norm;
                }
                filled.push(col);
                break;
            }
        }
    }
}

/// Closed-form eigenpairs of `(1/(d1 + d2))·[[d1, s], [s, d2]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoByTwoEigen {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// Unit eigenvector for `lambda_plus`, largest entry positive.
    pub e_plus: [f64; 2],
    /// Unit eigenvector for `lambda_minus`, largest entry positive.
    pub e_minus: [f64; 2],
    /// Set when `d1 == d2` and `s == 0`; the eigenbasis is then arbitrary and
    /// reported as the standard basis.
    pub degenerate: bool,
}

/// Eigenpairs of the trace-normalized 2×2 block in terms of the diagonal gap
/// `G = d1 - d2` and the off-diagonal `s`:
///
/// ```text
/// λ± = (N ± √(G² + 4s²)) / 2N,   N = d1 + d2
/// e+ ∝ (√(G² + 4s²) + G,  2s)
/// e- ∝ (√(G² + 4s²) - G, -2s)
/// ```
pub fn two_by_two_eig(d1: f64, d2: f64, s: f64) -> Result<TwoByTwoEigen, LinalgError> {
    if !(d1.is_finite() && d2.is_finite() && s.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let total = d1 + d2;
    if total == 0.0 {
        return Err(LinalgError::ZeroTrace);
    }
    let gap = d1 - d2;
    let root = (gap * gap + 4.0 * s * s).sqrt();
    let lambda_plus = (total + root) / (2.0 * total);
    let lambda_minus = (total - root) / (2.0 * total);
    if root == 0.0 {
        return Ok(TwoByTwoEigen {
            lambda_plus,
            lambda_minus,
            e_plus: [1.0, 0.0],
            e_minus: [0.0, 1.0],
            degenerate: true,
        });
    }
    // Each eigenvector has two algebraically equivalent forms; the one with
    // the larger norm avoids the 0/0 when s = 0.
    let e_plus = pick_form([root + gap, 2.0 * s], [2.0 * s, root - gap]);
    let e_minus = pick_form([root - gap, -2.0 * s], [-2.0 * s, root + gap]);
    Ok(TwoByTwoEigen { lambda_plus, lambda_minus, e_plus, e_minus, degenerate: false })
}

fn pick_form(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    let (v, n) = if na >= nb { (a, na) } else { (b, nb) };
    let mut out = [v[0] / n, v[1] / n];
    canonical_sign(&mut out);
    out
}
