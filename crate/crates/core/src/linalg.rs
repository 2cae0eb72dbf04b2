//! Dense row-major linear algebra in `f64`.
//!
//! Everything downstream (activations, weights, rotations) is a
//! [`DenseMatrix`]. The routines here are deliberately plain loops: the
//! models in this crate are small, and bit-reproducibility matters more
//! than throughput.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major real matrix with at least one row and one column.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Build from row-major data, rejecting empty shapes and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "shape {rows}x{cols} has an empty dimension"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "shape {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix shape {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Self::new(1, v.len(), v.to_vec()).expect("row vector must be non-empty and finite")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols && width > 0);
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Rows `start..start + height`.
    pub fn row_block(&self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows && height > 0);
        Self {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        }
    }

    /// Select whole rows by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        assert!(!idx.is_empty());
        let mut out = Self::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Horizontal concatenation.
    pub fn hconcat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidMatrix("nothing to concatenate".into()))?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("hconcat", first.shape(), bad.shape()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                out.row_mut(r)[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        Ok(out)
    }

    /// Multiply row `r` by `w[r]`.
    pub fn scale_rows(&self, w: &[f64]) -> Self {
        assert_eq!(w.len(), self.rows);
        let mut out = self.clone();
        for (r, &k) in w.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `A·B`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `A·Bᵀ` without materializing the transpose.
pub fn matmul_transb(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_transb", a.shape(), b.shape()));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `Aᵀ·B` without materializing the transpose.
pub fn matmul_transa(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_transa", a.shape(), b.shape()));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ai) in arow.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ai * bv;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax of each row.
pub fn row_softmax(a: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `x·sigmoid(x)`.
pub fn silu(a: &DenseMatrix) -> DenseMatrix {
    a.map(|x| x * sigmoid(x))
}

/// Unnormalized second moment `XᵀX`; the result is exactly symmetric.
pub fn second_moment(x: &DenseMatrix) -> DenseMatrix {
    let n = x.cols;
    let mut out = DenseMatrix::zeros(n, n);
    for r in 0..x.rows {
        let row = x.row(r);
        for i in 0..n {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..n {
                out.data[i * n + j] += xi * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            out.data[i * n + j] = out.data[j * n + i];
        }
    }
    out
}

/// Eigendecomposition of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DenseMatrix,
}

impl SymmetricEigen {
    /// `U·diag(λ)·Uᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| u.get(i, k) * self.eigenvalues[k] * u.get(j, k))
                .sum()
        })
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps over all `(p, q)` pairs until the off-diagonal Frobenius norm
/// drops below `1e-12 · max(1, ‖C‖_F)`. Eigenvalues come back in
/// descending order and each eigenvector column has its largest-magnitude
/// entry made positive, so the output is fully determined by the input.
pub fn symmetric_eig(c: &DenseMatrix) -> Result<SymmetricEigen> {
    let n = c.rows;
    if c.cols != n {
        return Err(Error::InvalidMatrix(format!(
            "symmetric_eig needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    let scale = c.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (c.get(i, j) - c.get(j, i)).abs() > 1e-10 * scale {
                return Err(Error::InvalidMatrix(format!(
                    "symmetric_eig needs a symmetric matrix; entries ({i},{j}) and ({j},{i}) differ"
                )));
            }
        }
    }

    let mut a = c.data.clone();
    let mut v = DenseMatrix::identity(n).data;
    let tol = JACOBI_TOL * c.frobenius_norm().max(1.0);

    let mut converged = false;
    for sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a, n) < tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // once rotations stop changing the diagonal, zero the pair outright
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    if !converged {
        let residual = off_diagonal_norm(&a, n);
        if residual >= tol {
            return Err(Error::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
                residual,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order among equal eigenvalues
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut best = 0usize;
        for k in 0..n {
            if v[k * n + src].abs() > v[best * n + src].abs() {
                best = k;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.data[k * n + dst] = sign * v[k * n + src];
        }
    }
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Seeded ChaCha20 stream; identical seeds give identical draws everywhere.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| std * self.normal())
    }
}

/// Seeded random orthogonal matrix: a Gaussian matrix whose columns are
/// orthonormalized with twice-iterated modified Gram-Schmidt.
pub fn random_orthogonal(n: usize, rng: &mut SeededRng) -> DenseMatrix {
    assert!(n >= 1);
    loop {
        let g = rng.gaussian_matrix(n, n, 1.0);
        if let Some(q) = orthonormalize_columns(&g) {
            return q;
        }
    }
}

fn orthonormalize_columns(g: &DenseMatrix) -> Option<DenseMatrix> {
    let n = g.cols;
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| g.column(j)).collect();
    for j in 0..n {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let qi = &done[i];
                let dot: f64 = qi.iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(qi).for_each(|(x, q)| *x -= dot * q);
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return None;
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    Some(DenseMatrix::from_fn(g.rows, n, |r, c| cols[c][r]))
}

/// Largest entrywise deviation of `QQᵀ` from the identity.
pub fn orthogonality_error(q: &DenseMatrix) -> f64 {
    let qqt = matmul_transb(q, q).expect("square");
    qqt.max_abs_diff(&DenseMatrix::identity(q.rows))
}
