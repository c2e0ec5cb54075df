//! Matrix estimation from partially observed Q-tables.
//!
//! The anchor estimators reconstruct the whole table from a few fully
//! explored rows and columns, `Q̄ = Q̂(:, A♯) · Q̂(S♯, A♯)† · Q̂(S♯, :)`, which is
//! exact whenever the anchor block has the same rank as the table. Their
//! ℓ∞ error amplification is bounded (see [`me_error_constant`] and
//! [`MeGuarantee`]). USVT and soft-impute are the conventional baselines;
//! they take entries sampled independently and carry no ℓ∞ guarantee.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv_with_rank, svd, DenseMatrix};

/// Relative pivot floor for the closed-form anchor estimators, as a
/// fraction of the value bound.
pub const PIVOT_REL_FLOOR: f64 = 1e-8;

/// Value stored in unobserved slots. Estimators never read it.
pub const UNOBSERVED: f64 = 0.0;

/// A matrix together with the set of entries that were actually measured.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix {
    matrix: DenseMatrix,
    observed: Vec<bool>,
}

impl MaskedMatrix {
    pub fn new(mut matrix: DenseMatrix, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != matrix.rows() * matrix.cols() {
            return Err(Error::InvalidInput(format!(
                "mask has {} entries for a {}x{} matrix",
                observed.len(),
                matrix.rows(),
                matrix.cols()
            )));
        }
        for (v, &seen) in matrix.as_mut_slice().iter_mut().zip(&observed) {
            if !seen {
                *v = UNOBSERVED;
            }
        }
        Ok(Self { matrix, observed })
    }

    pub fn fully_observed(matrix: DenseMatrix) -> Self {
        let n = matrix.rows() * matrix.cols();
        Self { matrix, observed: vec![true; n] }
    }

    /// Empty table of the given shape; fill it with [`MaskedMatrix::set`].
    pub fn unobserved(rows: usize, cols: usize) -> Self {
        Self { matrix: DenseMatrix::zeros(rows, cols), observed: vec![false; rows * cols] }
    }

    /// Observes only the anchor cross `{(s, a): s ∈ rows or a ∈ cols}`.
    pub fn anchor_cross(full: &DenseMatrix, rows: &[usize], cols: &[usize]) -> Self {
        let mut out = Self::unobserved(full.rows(), full.cols());
        for &i in rows {
            for j in 0..full.cols() {
                out.set(i, j, full[(i, j)]);
            }
        }
        for i in 0..full.rows() {
            for &j in cols {
                out.set(i, j, full[(i, j)]);
            }
        }
        out
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.matrix.cols();
        self.matrix[(i, j)] = value;
        self.observed[i * c + j] = true;
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    /// Observed values with unobserved slots holding [`UNOBSERVED`].
    pub fn values(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.matrix.cols() + j]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    pub fn observed_fraction(&self) -> f64 {
        let n = self.observed.len();
        if n == 0 {
            0.0
        } else {
            self.observed_count() as f64 / n as f64
        }
    }

    fn require_cross(&self, rows: &[usize], cols: &[usize]) -> Result<()> {
        let (m, n) = self.shape();
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::InvalidInput("anchor sets must be nonempty".into()));
        }
        if let Some(&i) = rows.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidInput(format!("anchor row {i} out of range for {m} rows")));
        }
        if let Some(&j) = cols.iter().find(|&&j| j >= n) {
            return Err(Error::InvalidInput(format!("anchor column {j} out of range for {n} columns")));
        }
        for &i in rows {
            if let Some(j) = (0..n).find(|&j| !self.is_observed(i, j)) {
                return Err(Error::InvalidInput(format!("anchor row {i} is unobserved at column {j}")));
            }
        }
        for &j in cols {
            if let Some(i) = (0..m).find(|&i| !self.is_observed(i, j)) {
                return Err(Error::InvalidInput(format!("anchor column {j} is unobserved at row {i}")));
            }
        }
        Ok(())
    }
}

/// The ℓ∞ guarantee an estimator offers: outputs are within `c_me·ε` of the
/// truth whenever inputs on an exploration set of size at most
/// `big_c_me·(|S| + |A|)` are within `ε ≤ eps_validity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeGuarantee {
    pub c_me: f64,
    pub big_c_me: f64,
    pub eps_validity: f64,
}

impl MeGuarantee {
    /// Rank-1 ratio estimator: `c_me = 7 R_max/R_min` for `ε ≤ V_min/2`.
    pub fn rank1(r_max: f64, r_min: f64, gamma: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_max >= r_min) {
            return Err(Error::InvalidInput(format!(
                "rank-1 guarantee needs 0 < R_min ≤ R_max, got R_min={r_min}, R_max={r_max}"
            )));
        }
        let v_min = r_min / (1.0 - gamma);
        Ok(Self { c_me: 7.0 * r_max / r_min, big_c_me: 1.0, eps_validity: 0.5 * v_min })
    }

    /// Rank-1 estimator with validity radius `c·V_min`, `c ∈ (0,1)`:
    /// `c_me = (3+c)/(1−c) · R_max/R_min`.
    pub fn rank1_with_radius(r_max: f64, r_min: f64, gamma: f64, c: f64) -> Result<Self> {
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidInput(format!("radius fraction must lie in (0,1), got {c}")));
        }
        let base = Self::rank1(r_max, r_min, gamma)?;
        Ok(Self {
            c_me: (3.0 + c) / (1.0 - c) * r_max / r_min,
            big_c_me: 1.0,
            eps_validity: c * 2.0 * base.eps_validity,
        })
    }

    /// Explicit rank-2 estimator: `η = 40 R_max⁴ / (Δ² R_min⁴)` for
    /// `ε ≤ c·V_min`, where the anchor cross-ratio exceeds
    /// `((1+c)² + Δ)/(1−c)²`.
    pub fn rank2(r_max: f64, r_min: f64, gamma: f64, delta: f64, c: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidInput(format!("Δ must be positive, got {delta}")));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidInput(format!("c must lie in (0,1), got {c}")));
        }
        let base = Self::rank1(r_max, r_min, gamma)?;
        let ratio = r_max / r_min;
        Ok(Self {
            c_me: 40.0 * ratio.powi(4) / (delta * delta),
            big_c_me: 2.0,
            eps_validity: c * 2.0 * base.eps_validity,
        })
    }

    /// General anchor estimator with `|S♯| × |A♯|` anchors.
    pub fn rank_r(r: usize, sigma_r: f64, v_max: f64, n_anchor_s: usize, n_anchor_a: usize) -> Result<Self> {
        let c_me = me_error_constant(r, sigma_r, v_max, n_anchor_s, n_anchor_a)?;
        let root = ((n_anchor_s * n_anchor_a) as f64).sqrt();
        Ok(Self {
            c_me,
            big_c_me: n_anchor_s.max(n_anchor_a) as f64,
            eps_validity: sigma_r / (2.0 * root),
        })
    }
}

/// Amplification constant of the anchor estimator,
/// `(6√2·k/σ_r + 2(1+√5)·(k/σ_r)²)·V_max` with `k = √(|S♯||A♯|)`.
/// With `|S♯| = |A♯| = r`, `k = r`.
pub fn me_error_constant(
    r: usize,
    sigma_r: f64,
    v_max: f64,
    n_anchor_s: usize,
    n_anchor_a: usize,
) -> Result<f64> {
    if !(sigma_r > 0.0) || !sigma_r.is_finite() {
        return Err(Error::InvalidInput(format!("sigma_r must be positive, got {sigma_r}")));
    }
    if r == 0 || n_anchor_s == 0 || n_anchor_a == 0 {
        return Err(Error::InvalidInput("rank and anchor counts must be at least 1".into()));
    }
    let k = ((n_anchor_s * n_anchor_a) as f64).sqrt() / sigma_r;
    Ok((6.0 * std::f64::consts::SQRT_2 * k + 2.0 * (1.0 + 5f64.sqrt()) * k * k) * v_max)
}

/// Rank-1 ratio estimator `Q̄(s,a) = Q̂(s,a♯) Q̂(s♯,a) / Q̂(s♯,a♯)`.
///
/// Rejects pivots with `|Q̂(s♯,a♯)| < pivot_floor`. Entries on the anchor
/// cross are copied through unchanged.
pub fn me_rank1(qhat: &MaskedMatrix, anchor_row: usize, anchor_col: usize, pivot_floor: f64) -> Result<DenseMatrix> {
    qhat.require_cross(&[anchor_row], &[anchor_col])?;
    let q = qhat.values();
    let pivot = q[(anchor_row, anchor_col)];
    if !(pivot.abs() >= pivot_floor) || pivot == 0.0 {
        return Err(Error::SingularPivot { pivot, threshold: pivot_floor });
    }
    let (m, n) = q.shape();
    let col = q.column(anchor_col);
    let row = q.row(anchor_row).to_vec();
    let mut out = DenseMatrix::from_fn(m, n, |i, j| col[i] * row[j] / pivot);
    out.row_mut(anchor_row).copy_from_slice(&row);
    for (i, &v) in col.iter().enumerate() {
        out[(i, anchor_col)] = v;
    }
    Ok(out)
}

/// Closed-form rank-2 estimator via the adjugate of the 2×2 anchor block.
///
/// Rejects blocks with `|det| < pivot_floor · ‖block‖_max`.
pub fn me_rank2_explicit(
    qhat: &MaskedMatrix,
    anchor_rows: [usize; 2],
    anchor_cols: [usize; 2],
    pivot_floor: f64,
) -> Result<DenseMatrix> {
    if anchor_rows[0] == anchor_rows[1] || anchor_cols[0] == anchor_cols[1] {
        return Err(Error::DegenerateAnchor("rank-2 anchors must be distinct".into()));
    }
    qhat.require_cross(&anchor_rows, &anchor_cols)?;
    let q = qhat.values();
    let [s1, s2] = anchor_rows;
    let [a1, a2] = anchor_cols;
    let (q11, q12, q21, q22) = (q[(s1, a1)], q[(s1, a2)], q[(s2, a1)], q[(s2, a2)]);
    let det = q11 * q22 - q21 * q12;
    let scale = q11.abs().max(q12.abs()).max(q21.abs()).max(q22.abs());
    let threshold = pivot_floor * scale;
    if !(det.abs() >= threshold) || det == 0.0 {
        return Err(Error::DegenerateAnchor(format!(
            "anchor determinant {det:.3e} is below threshold {threshold:.3e}"
        )));
    }
    let (m, n) = q.shape();
    Ok(DenseMatrix::from_fn(m, n, |i, j| {
        let (l1, l2) = (q[(i, a1)], q[(i, a2)]);
        let (r1, r2) = (q[(s1, j)], q[(s2, j)]);
        // [l1 l2] · [[q22, −q12], [−q21, q11]] · [r1; r2]
        (l1 * (q22 * r1 - q12 * r2) + l2 * (-q21 * r1 + q11 * r2)) / det
    }))
}

/// Settings for [`me_rankr_anchor`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorOptions {
    /// Relative cutoff for the pseudoinverse of the anchor block.
    pub rank_tol: f64,
    /// Requested rank. When set, the pseudoinverse keeps exactly this many
    /// singular triplets and the block must certify that rank.
    pub rank: Option<usize>,
    /// Absolute floor on `σ_r` of the anchor block.
    pub min_sigma_r: f64,
}

impl Default for AnchorOptions {
    fn default() -> Self {
        Self { rank_tol: crate::linalg::DEFAULT_RANK_TOL, rank: None, min_sigma_r: 0.0 }
    }
}

/// Output of the anchor estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFit {
    pub estimate: DenseMatrix,
    /// `σ_r` of the observed anchor block, `r` being the rank used.
    pub sigma_r: f64,
    /// Number of singular triplets kept in the pseudoinverse.
    pub rank: usize,
}

/// `Q̄ = Q̂(:, A♯) · [Q̂(S♯, A♯)]† · Q̂(S♯, :)`.
pub fn me_rankr_anchor(
    qhat: &MaskedMatrix,
    anchor_rows: &[usize],
    anchor_cols: &[usize],
    opts: &AnchorOptions,
) -> Result<AnchorFit> {
    qhat.require_cross(anchor_rows, anchor_cols)?;
    let q = qhat.values();
    let block = q.select(anchor_rows, anchor_cols);
    let (pinv, kept, sigmas) = pinv_with_rank(&block, opts.rank_tol, opts.rank)?;
    let rank = opts.rank.unwrap_or(kept);
    if rank == 0 || kept < rank {
        return Err(Error::DegenerateAnchor(format!(
            "anchor block certifies rank {kept}, requested {rank} (σ = {:?})",
            sigmas
        )));
    }
    let sigma_r = sigmas[rank - 1];
    if sigma_r < opts.min_sigma_r {
        return Err(Error::DegenerateAnchor(format!(
            "σ_{rank} of anchor block is {sigma_r:.3e}, below floor {:.3e}",
            opts.min_sigma_r
        )));
    }
    let all_rows: Vec<usize> = (0..q.rows()).collect();
    let all_cols: Vec<usize> = (0..q.cols()).collect();
    let left = q.select(&all_rows, anchor_cols);
    let right = q.select(anchor_rows, &all_cols);
    let estimate = left.matmul(&pinv.matmul(&right)?)?;
    Ok(AnchorFit { estimate, sigma_r, rank })
}

fn clip(m: DenseMatrix, bound: Option<f64>) -> DenseMatrix {
    match bound {
        Some(b) => m.map(|v| v.clamp(-b, b)),
        None => m,
    }
}

/// Universal singular value thresholding: zero-fill, rescale by `1/p`,
/// keep singular values above `threshold_mult·√max(m,n)`.
pub fn me_usvt(qhat: &MaskedMatrix, sample_prob: f64, threshold_mult: f64, bound: Option<f64>) -> Result<DenseMatrix> {
    if !(sample_prob > 0.0 && sample_prob <= 1.0) {
        return Err(Error::InvalidInput(format!("sample_prob must lie in (0,1], got {sample_prob}")));
    }
    if !(threshold_mult >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold_mult must be nonnegative, got {threshold_mult}")));
    }
    let (m, n) = qhat.shape();
    if m == 0 || n == 0 {
        return Ok(DenseMatrix::zeros(m, n));
    }
    let filled = qhat.values().scale(1.0 / sample_prob);
    let dec = svd(&filled)?;
    let threshold = threshold_mult * (m.max(n) as f64).sqrt();
    let kept = dec.singular_values.iter().take_while(|&&s| s > threshold && s > 0.0).count();
    Ok(clip(dec.reconstruct(kept), bound))
}

/// Result of a soft-impute run.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftImputeFit {
    pub estimate: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Soft-impute: alternate imputing unobserved entries with the current
/// estimate and soft-thresholding singular values by `lambda`, starting from
/// the zero matrix. Stops when the relative Frobenius change drops to `tol`.
pub fn me_soft_impute(
    qhat: &MaskedMatrix,
    lambda: f64,
    max_iters: usize,
    tol: f64,
    bound: Option<f64>,
) -> Result<SoftImputeFit> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {lambda}")));
    }
    if max_iters == 0 {
        return Err(Error::InvalidInput("max_iters must be at least 1".into()));
    }
    let (m, n) = qhat.shape();
    let observed = qhat.values();
    let mut z = DenseMatrix::zeros(m, n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let filled = DenseMatrix::from_fn(m, n, |i, j| if qhat.is_observed(i, j) { observed[(i, j)] } else { z[(i, j)] });
        let next = svd(&filled)?.reconstruct_with(|s| (s - lambda).max(0.0));
        let change = next.sub(&z)?.frobenius_norm();
        let scale = z.frobenius_norm().max(f64::MIN_POSITIVE);
        z = next;
        if change <= tol * scale || change == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(SoftImputeFit { estimate: clip(z, bound), iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd_spectrum;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn rank1_exact_recovery() {
        let full = DenseMatrix::outer(&[1.0, 2.0], &[3.0, 4.0]);
        let obs = MaskedMatrix::anchor_cross(&full, &[0], &[0]);
        let est = me_rank1(&obs, 0, 0, 1e-8).unwrap();
        assert_eq!(est[(1, 1)], 8.0);
        assert_eq!(est, full);
    }

    #[test]
    fn rank1_single_entry() {
        let obs = MaskedMatrix::fully_observed(DenseMatrix::filled(1, 1, 5.0));
        assert_eq!(me_rank1(&obs, 0, 0, 1e-8).unwrap()[(0, 0)], 5.0);
    }

    #[test]
    fn rank1_rejects_small_pivot() {
        let full = DenseMatrix::outer(&[1e-12, 2.0], &[1.0, 4.0]);
        let obs = MaskedMatrix::anchor_cross(&full, &[0], &[0]);
        assert!(matches!(me_rank1(&obs, 0, 0, 1e-8), Err(Error::SingularPivot { .. })));
    }

    #[test]
    fn rank1_requires_observed_cross() {
        let full = DenseMatrix::outer(&[1.0, 2.0], &[3.0, 4.0]);
        let obs = MaskedMatrix::anchor_cross(&full, &[0], &[0]);
        assert!(matches!(me_rank1(&obs, 1, 1, 1e-8), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rank1_noisy_within_bound() {
        // R_min = 1, R_max = 2 on a rank-1 table with ε = 0.01.
        let mut seed = 11;
        let f: Vec<f64> = (0..30).map(|_| 1.0 + 0.414 * lcg(&mut seed)).collect();
        let g: Vec<f64> = (0..25).map(|_| 1.0 + 0.414 * lcg(&mut seed)).collect();
        let truth = DenseMatrix::outer(&f, &g);
        let eps = 0.01;
        let noisy = truth.map(|v| v).add(&DenseMatrix::from_fn(30, 25, |_, _| eps * (2.0 * lcg(&mut seed) - 1.0))).unwrap();
        let obs = MaskedMatrix::anchor_cross(&noisy, &[3], &[7]);
        let est = me_rank1(&obs, 3, 7, 1e-8).unwrap();
        let err = est.max_abs_diff(&truth);
        assert!(err <= 7.0 * 2.0 * eps, "err {err}");
        assert!(err <= 0.14);
    }

    #[test]
    fn rank2_identity_block() {
        let f1 = [1.0, 0.0, 1.0];
        let f2 = [0.0, 1.0, 1.0];
        let full = DenseMatrix::outer(&f1, &f1).add(&DenseMatrix::outer(&f2, &f2)).unwrap();
        let obs = MaskedMatrix::anchor_cross(&full, &[0, 1], &[0, 1]);
        let est = me_rank2_explicit(&obs, [0, 1], [0, 1], 1e-8).unwrap();
        assert_eq!(est[(2, 2)], 2.0);
        assert!(est.max_abs_diff(&full) < 1e-15);
    }

    #[test]
    fn rank2_rejects_rank1_input() {
        let full = DenseMatrix::outer(&[1.0, 2.0, 3.0], &[1.0, 5.0, 2.0]);
        let obs = MaskedMatrix::anchor_cross(&full, &[0, 1], &[0, 1]);
        assert!(matches!(me_rank2_explicit(&obs, [0, 1], [0, 1], 1e-8), Err(Error::DegenerateAnchor(_))));
    }

    #[test]
    fn rank2_random_noiseless() {
        let mut seed = 5;
        let mut rnd = |n: usize| (0..n).map(|_| 2.0 * lcg(&mut seed) - 1.0).collect::<Vec<_>>();
        let (f1, f2, g1, g2) = (rnd(5), rnd(5), rnd(5), rnd(5));
        let full = DenseMatrix::outer(&f1, &g1).add(&DenseMatrix::outer(&f2, &g2)).unwrap();
        let obs = MaskedMatrix::anchor_cross(&full, &[0, 1], &[0, 1]);
        let est = me_rank2_explicit(&obs, [0, 1], [0, 1], 1e-8).unwrap();
        assert!(est.max_abs_diff(&full) <= 1e-9 * full.max_abs());
    }

    #[test]
    fn rankr_reduces_to_rank1() {
        let full = DenseMatrix::outer(&[1.5, 2.0, 0.7], &[3.0, 4.0, 1.1, 2.2]);
        let obs = MaskedMatrix::anchor_cross(&full, &[1], &[2]);
        let a = me_rank1(&obs, 1, 2, 1e-8).unwrap();
        let b = me_rankr_anchor(&obs, &[1], &[2], &AnchorOptions::default()).unwrap();
        assert!(a.max_abs_diff(&b.estimate) <= 1e-12);
        assert_eq!(b.rank, 1);
    }

    #[test]
    fn rankr_exact_on_rank3() {
        let mut seed = 99;
        let mut rnd = |n: usize| (0..n).map(|_| 2.0 * lcg(&mut seed) - 1.0).collect::<Vec<_>>();
        let mut full = DenseMatrix::zeros(20, 15);
        for _ in 0..3 {
            full = full.add(&DenseMatrix::outer(&rnd(20), &rnd(15))).unwrap();
        }
        let rows = [2, 9, 17];
        let cols = [0, 6, 11];
        let obs = MaskedMatrix::anchor_cross(&full, &rows, &cols);
        let fit = me_rankr_anchor(&obs, &rows, &cols, &AnchorOptions { rank: Some(3), ..Default::default() }).unwrap();
        assert!(fit.estimate.max_abs_diff(&full) <= 1e-8 * full.max_abs());
    }

    #[test]
    fn rankr_rejects_deficient_block() {
        let full = DenseMatrix::outer(&[1.0, 2.0, 3.0], &[1.0, 5.0, 2.0]);
        let obs = MaskedMatrix::anchor_cross(&full, &[0, 1], &[0, 1]);
        let opts = AnchorOptions { rank: Some(2), ..Default::default() };
        assert!(matches!(me_rankr_anchor(&obs, &[0, 1], &[0, 1], &opts), Err(Error::DegenerateAnchor(_))));
        let floor = AnchorOptions { min_sigma_r: 1e3, ..Default::default() };
        assert!(matches!(me_rankr_anchor(&obs, &[0], &[0], &floor), Err(Error::DegenerateAnchor(_))));
    }

    #[test]
    fn error_constant_values() {
        let c = me_error_constant(1, 1.0, 1.0, 1, 1).unwrap();
        assert!((c - (6.0 * 2f64.sqrt() + 2.0 * (1.0 + 5f64.sqrt()))).abs() < 1e-12);
        assert!((c - 14.9575).abs() < 1e-4);
        assert_eq!(me_error_constant(3, 0.5, 0.0, 3, 3).unwrap(), 0.0);
        assert!(me_error_constant(2, 2.0, 1.0, 2, 2).unwrap() < me_error_constant(2, 1.0, 1.0, 2, 2).unwrap());
        assert!(me_error_constant(1, 0.0, 1.0, 1, 1).is_err());
        assert!(me_error_constant(1, -1.0, 1.0, 1, 1).is_err());
        // Square anchors reproduce the simplified r/σ_r form.
        let general = me_error_constant(4, 0.7, 3.0, 4, 4).unwrap();
        let k = 4.0 / 0.7;
        let simple = (6.0 * 2f64.sqrt() * k + 2.0 * (1.0 + 5f64.sqrt()) * k * k) * 3.0;
        assert!((general - simple).abs() <= 1e-12 * simple);
    }

    #[test]
    fn guarantees() {
        let g = MeGuarantee::rank1(2.0, 1.0, 0.5).unwrap();
        assert_eq!(g.c_me, 14.0);
        assert_eq!(g.big_c_me, 1.0);
        assert_eq!(g.eps_validity, 1.0);
        let g2 = MeGuarantee::rank2(2.0, 1.0, 0.0, 2.0, 0.1).unwrap();
        assert_eq!(g2.c_me, 40.0 * 16.0 / 4.0);
        assert!(MeGuarantee::rank1(1.0, 0.0, 0.5).is_err());
        let gr = MeGuarantee::rank_r(2, 1.0, 1.0, 2, 2).unwrap();
        assert_eq!(gr.eps_validity, 0.25);
        // c = 1/2 gives the same 7·R_max/R_min constant at radius V_min/2.
        let half = MeGuarantee::rank1_with_radius(2.0, 1.0, 0.0, 0.5).unwrap();
        assert_eq!(half.c_me, 14.0);
        assert_eq!(half.eps_validity, 0.5);
    }

    #[test]
    fn usvt_full_observation_reproduces_input() {
        let m = DenseMatrix::from_fn(6, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5) + (i * j % 3) as f64);
        let out = me_usvt(&MaskedMatrix::fully_observed(m.clone()), 1.0, 0.0, None).unwrap();
        assert!(out.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn usvt_zero_matrix() {
        let mut mask = vec![false; 12];
        mask[3] = true;
        mask[7] = true;
        let obs = MaskedMatrix::new(DenseMatrix::zeros(3, 4), mask).unwrap();
        assert_eq!(me_usvt(&obs, 0.5, 1.0, None).unwrap().max_abs(), 0.0);
    }

    fn usvt_rank1_case(n: usize, seed: u64) -> (f64, f64) {
        let mut seed = seed;
        let f: Vec<f64> = (0..n).map(|_| 0.5 + lcg(&mut seed)).collect();
        let g: Vec<f64> = (0..n).map(|_| 0.5 + lcg(&mut seed)).collect();
        let truth = DenseMatrix::outer(&f, &g);
        let mask: Vec<bool> = (0..n * n).map(|_| lcg(&mut seed) < 0.5).collect();
        let obs = MaskedMatrix::new(truth.clone(), mask).unwrap();
        let p = obs.observed_fraction();
        let out = me_usvt(&obs, p, 3.0, None).unwrap();
        let rel = out.sub(&truth).unwrap().frobenius_norm() / truth.frobenius_norm();
        // First-order perturbation of the top singular triplet under E = filled − truth.
        let e = obs.values().scale(1.0 / p).sub(&truth).unwrap();
        let (nf, ng) = (f.iter().map(|x| x * x).sum::<f64>().sqrt(), g.iter().map(|x| x * x).sum::<f64>().sqrt());
        let ev: Vec<f64> = (0..n).map(|i| (0..n).map(|j| e[(i, j)] * g[j] / ng).sum()).collect();
        let etu: Vec<f64> = (0..n).map(|j| (0..n).map(|i| e[(i, j)] * f[i] / nf).sum()).collect();
        let uev: f64 = ev.iter().zip(&f).map(|(a, b)| a * b / nf).sum();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let predicted = (sq(&ev) + sq(&etu) - uev * uev).sqrt() / (nf * ng);
        (rel, predicted)
    }

    #[test]
    fn usvt_rank1_half_mask() {
        let (rel, predicted) = usvt_rank1_case(100, 3);
        assert!((rel / predicted - 1.0).abs() <= 0.25, "relative error {rel}, first-order prediction {predicted}");
        assert!(rel <= 0.2, "relative error {rel}");
        let (rel, _) = usvt_rank1_case(400, 5);
        assert!(rel <= 0.1, "relative error {rel}");
    }

    #[test]
    fn usvt_clips_to_bound() {
        let m = DenseMatrix::filled(3, 3, 4.0);
        let out = me_usvt(&MaskedMatrix::fully_observed(m), 1.0, 0.0, Some(2.5)).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn soft_impute_lambda_zero_full_mask() {
        let m = DenseMatrix::from_fn(5, 4, |i, j| (i as f64) - 2.0 * (j as f64) + ((i + j) % 2) as f64);
        let fit = me_soft_impute(&MaskedMatrix::fully_observed(m.clone()), 0.0, 10, 1e-12, None).unwrap();
        assert!(fit.estimate.max_abs_diff(&m) < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn soft_impute_full_shrinkage() {
        let m = DenseMatrix::outer(&[1.0, 2.0, 3.0], &[1.0, 1.0]);
        let s1 = svd_spectrum(&m).unwrap().sigma(1);
        let fit = me_soft_impute(&MaskedMatrix::fully_observed(m), s1 + 0.1, 10, 1e-9, None).unwrap();
        assert_eq!(fit.estimate.max_abs(), 0.0);
    }

    #[test]
    fn soft_impute_rank2_completion() {
        let mut seed = 17;
        let mut rnd = |n: usize| (0..n).map(|_| 2.0 * lcg(&mut seed) - 1.0).collect::<Vec<_>>();
        let truth = DenseMatrix::outer(&rnd(50), &rnd(50)).add(&DenseMatrix::outer(&rnd(50), &rnd(50))).unwrap();
        let mut seed2 = 23;
        let mask: Vec<bool> = (0..2500).map(|_| lcg(&mut seed2) < 0.4).collect();
        let obs = MaskedMatrix::new(truth.clone(), mask).unwrap();
        let best = [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|&lambda| {
                let fit = me_soft_impute(&obs, lambda, 500, 1e-7, None).unwrap();
                fit.estimate.sub(&truth).unwrap().frobenius_norm() / truth.frobenius_norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 0.05, "best relative error {best}");
    }

    #[test]
    fn soft_impute_rejects_bad_arguments() {
        let obs = MaskedMatrix::fully_observed(DenseMatrix::zeros(2, 2));
        assert!(me_soft_impute(&obs, -1.0, 10, 1e-6, None).is_err());
        assert!(me_soft_impute(&obs, 1.0, 0, 1e-6, None).is_err());
        assert!(me_usvt(&obs, 0.0, 1.0, None).is_err());
    }

    #[test]
    fn masked_matrix_hides_unobserved_values() {
        let m = DenseMatrix::filled(2, 2, 3.0);
        let obs = MaskedMatrix::new(m, vec![true, false, false, true]).unwrap();
        assert_eq!(obs.values()[(0, 1)], UNOBSERVED);
        assert_eq!(obs.observed_count(), 2);
        assert!(MaskedMatrix::new(DenseMatrix::zeros(2, 2), vec![true]).is_err());
    }
}
