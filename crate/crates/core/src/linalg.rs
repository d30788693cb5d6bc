//! Dense and tridiagonal linear algebra kernels.
//!
//! Everything here works on plain `f64` slices. The tridiagonal solver is the
//! workhorse of every implicit stepper and of Newton's method; the dense
//! eigenvalue routine (Householder reduction to Hessenberg form followed by
//! Francis double-shift QR) is only used for stability analysis of assembled
//! method matrices.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Elimination pivots smaller than this are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("zero pivot {pivot:e} at row {row} during tridiagonal elimination")]
    ZeroPivot { row: usize, pivot: f64 },
    #[error("QR iteration failed to deflate eigenvalue {index} after {sweeps} sweeps")]
    NoConvergence { index: usize, sweeps: usize },
    #[error("spectrum is empty")]
    EmptySpectrum,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix entry is not finite")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Tridiagonal matrix stored as its three bands.
///
/// `sub[i]` sits at row `i + 1`, column `i`; `sup[i]` at row `i`, column `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TridiagonalMatrix {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl TridiagonalMatrix {
    pub fn new(sub: Vec<f64>, diag: Vec<f64>, sup: Vec<f64>) -> Result<Self> {
        let m = diag.len();
        if m == 0 {
            return Err(LinalgError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        for band in [&sub, &sup] {
            if band.len() != m - 1 {
                return Err(LinalgError::DimensionMismatch {
                    expected: m - 1,
                    actual: band.len(),
                });
            }
        }
        if sub.iter().chain(&diag).chain(&sup).any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { sub, diag, sup })
    }

    /// Constant-band Toeplitz matrix `tridiag(lower, main, upper)` of size `m`.
    pub fn from_constant(m: usize, lower: f64, main: f64, upper: f64) -> Result<Self> {
        Self::new(
            vec![lower; m.saturating_sub(1)],
            vec![main; m],
            vec![upper; m.saturating_sub(1)],
        )
    }

    pub fn identity(m: usize) -> Result<Self> {
        Self::from_constant(m, 0.0, 1.0, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn sub(&self) -> &[f64] {
        &self.sub
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn sup(&self) -> &[f64] {
        &self.sup
    }

    /// Returns `alpha * I + beta * self`.
    pub fn scaled_shift(&self, alpha: f64, beta: f64) -> Self {
        Self {
            sub: self.sub.iter().map(|v| beta * v).collect(),
            diag: self.diag.iter().map(|v| alpha + beta * v).collect(),
            sup: self.sup.iter().map(|v| beta * v).collect(),
        }
    }

    /// Adds `extra[i]` to each diagonal entry.
    pub fn add_diagonal(&self, extra: &[f64]) -> Self {
        debug_assert_eq!(extra.len(), self.dim());
        let mut out = self.clone();
        for (d, e) in out.diag.iter_mut().zip(extra) {
            *d += e;
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let m = self.dim();
        debug_assert_eq!(x.len(), m);
        (0..m)
            .map(|i| {
                let mut acc = self.diag[i] * x[i];
                if i > 0 {
                    acc += self.sub[i - 1] * x[i - 1];
                }
                if i + 1 < m {
                    acc += self.sup[i] * x[i + 1];
                }
                acc
            })
            .collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let m = self.dim();
        let mut dense = DenseMatrix::zeros(m);
        for i in 0..m {
            dense[(i, i)] = self.diag[i];
            if i + 1 < m {
                dense[(i, i + 1)] = self.sup[i];
                dense[(i + 1, i)] = self.sub[i];
            }
        }
        dense
    }
}

/// Solves `a * x = rhs` by the Thomas algorithm (no pivoting).
pub fn thomas_solve(a: &TridiagonalMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let m = a.dim();
    if rhs.len() != m {
        return Err(LinalgError::DimensionMismatch {
            expected: m,
            actual: rhs.len(),
        });
    }
    let mut c_prime = vec![0.0; m];
    let mut x = vec![0.0; m];

    let mut pivot = a.diag[0];
    if pivot.abs() < PIVOT_TOLERANCE {
        return Err(LinalgError::ZeroPivot { row: 0, pivot });
    }
    if m > 1 {
        c_prime[0] = a.sup[0] / pivot;
    }
    x[0] = rhs[0] / pivot;

    for i in 1..m {
        pivot = a.diag[i] - a.sub[i - 1] * c_prime[i - 1];
        if pivot.abs() < PIVOT_TOLERANCE || !pivot.is_finite() {
            return Err(LinalgError::ZeroPivot { row: i, pivot });
        }
        if i + 1 < m {
            c_prime[i] = a.sup[i] / pivot;
        }
        x[i] = (rhs[i] - a.sub[i - 1] * x[i - 1]) / pivot;
    }
    for i in (0..m - 1).rev() {
        x[i] -= c_prime[i] * x[i + 1];
    }
    Ok(x)
}

/// Square row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(LinalgError::DimensionMismatch {
                expected: n * n,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(n, data)
    }

    /// Builds a matrix from its columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.len();
        let mut out = Self::zeros(n);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    actual: col.len(),
                });
            }
            for (i, v) in col.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Maximum absolute row sum.
pub fn matrix_inf_norm(a: &DenseMatrix) -> f64 {
    (0..a.dim())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Eigenvalues of a real matrix, sorted by `(re, im)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpectrum {
    pub eigenvalues: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn new(mut eigenvalues: Vec<Complex64>) -> Self {
        eigenvalues.sort_by(compare_complex);
        Self { eigenvalues }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_imag_abs(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    pub fn min_real(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|z| z.re)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|z| z.re).collect()
    }
}

fn compare_complex(a: &Complex64, b: &Complex64) -> Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

pub fn spectral_radius(s: &ComplexSpectrum) -> Result<f64> {
    if s.is_empty() {
        return Err(LinalgError::EmptySpectrum);
    }
    Ok(s.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Upper bound on the matrix dimension accepted by [`eigenvalues`].
pub const MAX_EIGEN_DIM: usize = 2048;

/// All eigenvalues of `a`.
///
/// Householder reduction to upper Hessenberg form, then implicit double-shift
/// QR sweeps. A subdiagonal entry is deflated once it drops below machine
/// epsilon relative to its neighbouring diagonal entries. Complex pairs come
/// out of the trailing 2x2 blocks and are exact conjugates.
pub fn eigenvalues(a: &DenseMatrix) -> Result<ComplexSpectrum> {
    let n = a.dim();
    if n > MAX_EIGEN_DIM {
        return Err(LinalgError::DimensionMismatch {
            expected: MAX_EIGEN_DIM,
            actual: n,
        });
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if n == 0 {
        return Ok(ComplexSpectrum::new(Vec::new()));
    }
    let mut h = a.clone();
    reduce_to_hessenberg(&mut h);
    let eig = hessenberg_qr(&mut h)?;
    Ok(ComplexSpectrum::new(eig))
}

fn reduce_to_hessenberg(h: &mut DenseMatrix) {
    let n = h.dim();
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let alpha: f64 = (k + 1..n).map(|i| h[(i, k)] * h[(i, k)]).sum::<f64>().sqrt();
        if alpha == 0.0 {
            continue;
        }
        let x0 = h[(k + 1, k)];
        let sigma = if x0 >= 0.0 { -alpha } else { alpha };
        for i in k + 1..n {
            v[i] = h[(i, k)];
        }
        v[k + 1] -= sigma;
        let vnorm2: f64 = (k + 1..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // H <- (I - beta v v^T) H
        for j in k..n {
            let dot: f64 = (k + 1..n).map(|i| v[i] * h[(i, j)]).sum();
            let f = beta * dot;
            for i in k + 1..n {
                h[(i, j)] -= f * v[i];
            }
        }
        // H <- H (I - beta v v^T)
        for i in 0..n {
            let dot: f64 = (k + 1..n).map(|j| h[(i, j)] * v[j]).sum();
            let f = beta * dot;
            for j in k + 1..n {
                h[(i, j)] -= f * v[j];
            }
        }
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
        h[(k + 1, k)] = sigma;
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix, eigenvalues only.
fn hessenberg_qr(h: &mut DenseMatrix) -> Result<Vec<Complex64>> {
    let n = h.dim();
    let max_sweeps = 100 * n;
    let mut out = vec![Complex64::new(0.0, 0.0); n];

    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += h[(i, j)].abs();
        }
    }
    if anorm == 0.0 {
        return Ok(out);
    }

    // `hi` is the index of the last row of the active block.
    let mut hi = n as isize - 1;
    let mut shift_acc = 0.0;
    let mut its = 0usize;
    let mut total_sweeps = 0usize;
    while hi >= 0 {
        let nn = hi as usize;
        // Find the top `l` of the unreduced block ending at `nn`.
        let mut l = nn;
        while l > 0 {
            let mut s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = anorm;
            }
            if h[(l, l - 1)].abs() <= f64::EPSILON * s {
                h[(l, l - 1)] = 0.0;
                break;
            }
            l -= 1;
        }

        let x = h[(nn, nn)];
        if l == nn {
            out[nn] = Complex64::new(x + shift_acc, 0.0);
            hi -= 1;
            its = 0;
            continue;
        }
        let y = h[(nn - 1, nn - 1)];
        let w = h[(nn, nn - 1)] * h[(nn - 1, nn)];
        if l == nn - 1 {
            let p = 0.5 * (y - x);
            let q = p * p + w;
            let z = q.abs().sqrt();
            let xs = x + shift_acc;
            if q >= 0.0 {
                let z = p + z.copysign(p);
                let upper = xs + z;
                let lower = if z != 0.0 { xs - w / z } else { upper };
                out[nn - 1] = Complex64::new(upper, 0.0);
                out[nn] = Complex64::new(lower, 0.0);
            } else {
                out[nn - 1] = Complex64::new(xs + p, z);
                out[nn] = Complex64::new(xs + p, -z);
            }
            hi -= 2;
            its = 0;
            continue;
        }

        if total_sweeps >= max_sweeps {
            return Err(LinalgError::NoConvergence {
                index: nn,
                sweeps: total_sweeps,
            });
        }
        let (mut x, mut y, mut w) = (x, y, w);
        if its > 0 && its % 10 == 0 {
            // Exceptional shift to break cycles.
            shift_acc += x;
            for i in 0..=nn {
                h[(i, i)] -= x;
            }
            let s = h[(nn, nn - 1)].abs() + h[(nn - 1, nn - 2)].abs();
            x = 0.75 * s;
            y = x;
            w = -0.4375 * s * s;
        }
        its += 1;
        total_sweeps += 1;

        // Look for two consecutive small subdiagonal elements.
        let mut m = nn - 2;
        let (mut p, mut q, mut r);
        loop {
            let z = h[(m, m)];
            let rr = x - z;
            let ss = y - z;
            p = (rr * ss - w) / h[(m + 1, m)] + h[(m, m + 1)];
            q = h[(m + 1, m + 1)] - z - rr - ss;
            r = h[(m + 2, m + 1)];
            let s = p.abs() + q.abs() + r.abs();
            p /= s;
            q /= s;
            r /= s;
            if m == l {
                break;
            }
            let u = h[(m, m - 1)].abs() * (q.abs() + r.abs());
            let v = p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs());
            if u <= f64::EPSILON * v {
                break;
            }
            m -= 1;
        }
        for i in m + 2..=nn {
            h[(i, i - 2)] = 0.0;
            if i != m + 2 {
                h[(i, i - 3)] = 0.0;
            }
        }

        // Double-shift QR step on rows l..=nn, columns m..=nn.
        let mut k = m;
        while k < nn {
            let mut scale = 0.0;
            if k != m {
                p = h[(k, k - 1)];
                q = h[(k + 1, k - 1)];
                r = if k != nn - 1 { h[(k + 2, k - 1)] } else { 0.0 };
                scale = p.abs() + q.abs() + r.abs();
                if scale != 0.0 {
                    p /= scale;
                    q /= scale;
                    r /= scale;
                }
            }
            let s = (p * p + q * q + r * r).sqrt().copysign(p);
            if s != 0.0 {
                if k == m {
                    if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                } else {
                    h[(k, k - 1)] = -s * scale;
                }
                p += s;
                let xk = p / s;
                let yk = q / s;
                let zk = r / s;
                q /= p;
                r /= p;
                for j in k..=nn {
                    let mut pp = h[(k, j)] + q * h[(k + 1, j)];
                    if k != nn - 1 {
                        pp += r * h[(k + 2, j)];
                        h[(k + 2, j)] -= pp * zk;
                    }
                    h[(k + 1, j)] -= pp * yk;
                    h[(k, j)] -= pp * xk;
                }
                let mmin = nn.min(k + 3);
                for i in l..=mmin {
                    let mut pp = xk * h[(i, k)] + yk * h[(i, k + 1)];
                    if k != nn - 1 {
                        pp += zk * h[(i, k + 2)];
                        h[(i, k + 2)] -= pp * r;
                    }
                    h[(i, k + 1)] -= pp * q;
                    h[(i, k)] -= pp;
                }
            }
            k += 1;
        }
    }
    Ok(out)
}

/// Max-norm of a vector.
pub fn inf_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Max-norm of `a - b`.
pub fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
