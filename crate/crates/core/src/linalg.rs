//! Dense matrices, singular spectra and the Moore-Penrose pseudoinverse.
//!
//! Storage is row-major: row `i` of a Q-table is state `i`. The heavy lifting
//! (bidiagonalisation + implicit QR) is delegated to `nalgebra`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative cutoff below which singular values are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidInput(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::from_row_major(n, m, rows.concat())
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

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Sub-matrix picking the given rows and columns, in order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidInput(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self::from_nalgebra(&(self.to_nalgebra() * rhs.to_nalgebra())))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Largest absolute entry (‖·‖_max).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Nonincreasing list of singular values σ₁ ≥ σ₂ ≥ … ≥ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    values: Vec<f64>,
}

impl SingularSpectrum {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("singular values must be finite and nonnegative".into()));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// σ_k with 1-based `k`; zero past the end.
    pub fn sigma(&self, k: usize) -> f64 {
        assert!(k >= 1, "singular values are 1-indexed");
        self.values.get(k - 1).copied().unwrap_or(0.0)
    }

    /// Σ σ_i², i.e. the squared Frobenius norm of the source matrix.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|s| s * s).sum()
    }

    /// Fraction of squared mass carried by the leading `k` values.
    pub fn mass_fraction(&self, k: usize) -> f64 {
        let total = self.energy();
        if total == 0.0 {
            return 1.0;
        }
        self.values.iter().take(k).map(|s| s * s).sum::<f64>() / total
    }
}

/// Thin SVD `M = U diag(σ) Vᵀ` with singular values sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let k = m.rows().min(m.cols());
    if k == 0 {
        return Ok(Svd {
            u: DMatrix::zeros(m.rows(), 0),
            singular_values: Vec::new(),
            v_t: DMatrix::zeros(0, m.cols()),
        });
    }
    let dec = m
        .to_faer()
        .thin_svd()
        .map_err(|e| Error::InvalidInput(format!("SVD did not converge: {e:?}")))?;
    let (u, v) = (dec.U(), dec.V());
    let s = dec.S().column_vector();
    Ok(Svd {
        u: DMatrix::from_fn(m.rows(), k, |i, j| u[(i, j)]),
        singular_values: (0..k).map(|i| s[i]).collect(),
        v_t: DMatrix::from_fn(k, m.cols(), |i, j| v[(j, i)]),
    })
}

impl Svd {
    /// Reassembles `Σ_{i<k} σ_i u_i v_iᵀ` for the leading `k` triplets.
    pub fn reconstruct(&self, k: usize) -> DenseMatrix {
        let k = k.min(self.singular_values.len());
        let (m, n) = (self.u.nrows(), self.v_t.ncols());
        let mut out = DMatrix::<f64>::zeros(m, n);
        for i in 0..k {
            let s = self.singular_values[i];
            if s == 0.0 {
                continue;
            }
            out += (self.u.column(i) * s) * self.v_t.row(i);
        }
        DenseMatrix::from_nalgebra(&out)
    }

    /// Reassembles with every singular value passed through `shrink`.
    pub fn reconstruct_with(&self, shrink: impl Fn(f64) -> f64) -> DenseMatrix {
        let (m, n) = (self.u.nrows(), self.v_t.ncols());
        let mut out = DMatrix::<f64>::zeros(m, n);
        for (i, &s) in self.singular_values.iter().enumerate() {
            let s = shrink(s);
            if s == 0.0 {
                continue;
            }
            out += (self.u.column(i) * s) * self.v_t.row(i);
        }
        DenseMatrix::from_nalgebra(&out)
    }
}

pub fn svd_spectrum(m: &DenseMatrix) -> Result<SingularSpectrum> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return SingularSpectrum::new(Vec::new());
    }
    let values = m
        .to_faer()
        .singular_values()
        .map_err(|e| Error::InvalidInput(format!("SVD did not converge: {e:?}")))?;
    SingularSpectrum::new(values.into_iter().map(|s| s.max(0.0)).collect())
}

/// Moore-Penrose pseudoinverse with singular values below `rank_tol·σ₁`
/// truncated to zero.
pub fn pseudoinverse(m: &DenseMatrix, rank_tol: f64) -> Result<DenseMatrix> {
    pseudoinverse_truncated(m, rank_tol, None)
}

/// Pseudoinverse that additionally keeps at most `max_rank` singular
/// triplets. Returns the inverse and the number of triplets kept.
pub fn pseudoinverse_truncated(
    m: &DenseMatrix,
    rank_tol: f64,
    max_rank: Option<usize>,
) -> Result<DenseMatrix> {
    Ok(pinv_with_rank(m, rank_tol, max_rank)?.0)
}

pub(crate) fn pinv_with_rank(
    m: &DenseMatrix,
    rank_tol: f64,
    max_rank: Option<usize>,
) -> Result<(DenseMatrix, usize, Vec<f64>)> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(Error::InvalidInput(format!("rank_tol must lie in (0,1), got {rank_tol}")));
    }
    let dec = svd(m)?;
    let sigma1 = dec.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = rank_tol * sigma1;
    let limit = max_rank.unwrap_or(usize::MAX);
    let (rows, cols) = m.shape();
    let mut out = DMatrix::<f64>::zeros(cols, rows);
    let mut kept = 0;
    for (i, &s) in dec.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 || kept >= limit {
            break;
        }
        out += (dec.v_t.row(i).transpose() / s) * dec.u.column(i).transpose();
        kept += 1;
    }
    Ok((DenseMatrix::from_nalgebra(&out), kept, dec.singular_values))
}

/// Smallest `r` with `Σ_{i>r} σ_i² ≤ delta`.
pub fn effective_rank(spectrum: &SingularSpectrum, delta: f64) -> usize {
    let values = spectrum.values();
    // tail[r] = Σ_{i ≥ r} σ_i² (0-based), accumulated from the small end.
    let mut tail = 0.0;
    let mut best = values.len();
    for r in (0..values.len()).rev() {
        tail += values[r] * values[r];
        if tail <= delta {
            best = r;
        } else {
            break;
        }
    }
    best
}
