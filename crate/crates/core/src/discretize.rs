//! β-nets over boxes, anchor selection and augmentation, the anchor-cross
//! exploration set, and exact 1-nearest-neighbour lookup.
//!
//! Distances are Euclidean in normalized coordinates (each box side mapped
//! to length 1). A net of radius β is the lattice of cell centers with
//! `ceil(√d / 2β)` cells per dimension.

use rand::Rng;

use crate::envs::BoxSpace;
use crate::error::{Error, Result};

/// Tolerance (normalized distance) under which an anchor is treated as an
/// existing grid point.
pub const DEDUP_TOL: f64 = 1e-12;

/// Lattice of cell centers, optionally extended with anchor points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridNet {
    space: BoxSpace,
    beta: f64,
    counts: Vec<usize>,
    lattice_len: usize,
    /// Row-major points, `dims` values each; lattice first, extras after.
    points: Vec<f64>,
    anchor_indices: Vec<usize>,
}

impl GridNet {
    /// Lattice with the given number of cells per dimension.
    pub fn with_counts(space: &BoxSpace, counts: &[usize]) -> Result<Self> {
        let d = space.dims();
        if counts.len() != d || counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidInput(format!("need {d} positive per-dimension counts, got {counts:?}")));
        }
        let lattice_len = counts
            .iter()
            .try_fold(1usize, |acc, &c| acc.checked_mul(c))
            .ok_or_else(|| Error::InvalidInput("grid too large".into()))?;
        let mut points = Vec::with_capacity(lattice_len * d);
        let mut idx = vec![0usize; d];
        for _ in 0..lattice_len {
            for k in 0..d {
                points.push(center(space, counts[k], k, idx[k]));
            }
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let beta = counts.iter().map(|&c| (0.5 / c as f64).powi(2)).sum::<f64>().sqrt();
        Ok(Self { space: space.clone(), beta, counts: counts.to_vec(), lattice_len, points, anchor_indices: Vec::new() })
    }

    pub fn space(&self) -> &BoxSpace {
        &self.space
    }

    /// Covering radius guaranteed by the lattice.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn dims(&self) -> usize {
        self.space.dims()
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dims()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lattice_len(&self) -> usize {
        self.lattice_len
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dims();
        &self.points[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.points.chunks_exact(self.dims())
    }

    pub fn anchor_indices(&self) -> &[usize] {
        &self.anchor_indices
    }

    /// Index of the closest point; ties go to the lowest index.
    pub fn nearest_index(&self, x: &[f64]) -> usize {
        let (mut best, mut best_d) = self.nearest_lattice(x);
        let d = self.dims();
        for i in self.lattice_len..self.len() {
            let dist = self.space.dist2(x, &self.points[i * d..(i + 1) * d]);
            if dist < best_d {
                best = i;
                best_d = dist;
            }
        }
        best
    }

    fn nearest_lattice(&self, x: &[f64]) -> (usize, f64) {
        let mut flat = 0usize;
        let mut total = 0.0;
        for k in 0..self.dims() {
            let n = self.counts[k];
            let range = self.space.range(k);
            let u = self.space.normalize(k, x[k]);
            let guess = ((u * n as f64).floor().max(0.0) as usize).min(n - 1);
            let lo = guess.saturating_sub(1);
            let hi = (guess + 1).min(n - 1);
            let (mut bi, mut bd) = (lo, f64::INFINITY);
            for i in lo..=hi {
                let diff = (x[k] - center(&self.space, n, k, i)) / range;
                let dd = diff * diff;
                if dd < bd {
                    bi = i;
                    bd = dd;
                }
            }
            flat = flat * n + bi;
            total += bd;
        }
        (flat, total)
    }

    /// Linear-scan nearest neighbour over every point; reference for tests.
    pub fn nearest_index_brute(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points().enumerate() {
            let dist = self.space.dist2(x, p);
            if dist < best_d {
                best = i;
                best_d = dist;
            }
        }
        best
    }

    /// Normalized distance from `x` to point `i`.
    pub fn distance(&self, x: &[f64], i: usize) -> f64 {
        self.space.dist2(x, self.point(i)).sqrt()
    }
}

#[inline]
fn center(space: &BoxSpace, n: usize, k: usize, i: usize) -> f64 {
    space.lower()[k] + space.range(k) * (i as f64 + 0.5) / n as f64
}

/// β-net of cell centers with covering radius at most `beta`.
pub fn build_net(space: &BoxSpace, beta: f64) -> Result<GridNet> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidInput(format!("beta must be positive and finite, got {beta}")));
    }
    let n = cells_for(space.dims(), beta);
    GridNet::with_counts(space, &vec![n; space.dims()])
}

/// Cells per dimension giving covering radius `beta` in `d` dimensions.
pub fn cells_for(d: usize, beta: f64) -> usize {
    let raw = (d as f64).sqrt() / (2.0 * beta);
    let n = (raw * (1.0 - 1e-12)).ceil();
    if n < 1.0 {
        1
    } else if n > usize::MAX as f64 / 2.0 {
        usize::MAX / 2
    } else {
        n as usize
    }
}

/// Anchor states `S♯` and actions `A♯`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// `σ_r` of the sampled anchor block, once measured.
    pub rank_certificate: Option<f64>,
}

/// `r` well-separated points: the longest axis of `space` is cut into `r`
/// equal slabs and one point is drawn per slab. `jitter ∈ [0,1]` scales the
/// draw around the slab center; `1` samples the whole slab uniformly and
/// `0` returns slab centers at the box centroid.
pub fn select_anchor_points<R: Rng + ?Sized>(space: &BoxSpace, r: usize, jitter: f64, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if r == 0 {
        return Err(Error::Config("anchor count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&jitter) {
        return Err(Error::Config(format!("anchor jitter must lie in [0,1], got {jitter}")));
    }
    let d = space.dims();
    let axis = (0..d).fold(0, |best, k| if space.range(k) > space.range(best) { k } else { best });
    let centroid = space.centroid();
    let mut out = Vec::with_capacity(r);
    for part in 0..r {
        let mut p = centroid.clone();
        for k in 0..d {
            let (mid, half) = if k == axis {
                let w = space.range(k) / r as f64;
                (space.lower()[k] + w * (part as f64 + 0.5), 0.5 * w)
            } else {
                (centroid[k], 0.5 * space.range(k))
            };
            let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
            p[k] = (mid + jitter * half * u).clamp(space.lower()[k], space.upper()[k]);
        }
        if space.periodic()[axis] && p[axis] >= space.upper()[axis] {
            p[axis] = space.lower()[axis];
        }
        out.push(p);
    }
    Ok(out)
}

/// Anchor states and actions; both draws come from the same stream, states
/// first.
pub fn select_anchors<R: Rng + ?Sized>(
    state_space: &BoxSpace,
    action_space: &BoxSpace,
    r: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<AnchorSet> {
    let states = select_anchor_points(state_space, r, jitter, rng)?;
    let actions = select_anchor_points(action_space, r, jitter, rng)?;
    Ok(AnchorSet { states, actions, rank_certificate: None })
}

/// Appends `anchors` to `grid`, reusing any existing point within
/// [`DEDUP_TOL`], and records their indices in order without repeats.
pub fn augment(grid: &GridNet, anchors: &[Vec<f64>]) -> Result<GridNet> {
    let mut out = grid.clone();
    for a in anchors {
        if a.len() != grid.dims() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("anchor has wrong dimension or non-finite entries".into()));
        }
        let near = out.nearest_index(a);
        let idx = if out.space.dist2(a, out.point(near)).sqrt() <= DEDUP_TOL {
            near
        } else {
            out.points.extend_from_slice(a);
            out.len() - 1
        };
        if !out.anchor_indices.contains(&idx) {
            out.anchor_indices.push(idx);
        }
    }
    Ok(out)
}

/// Entries `(state index, action index)` to explore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorationSet {
    pub pairs: Vec<(usize, usize)>,
}

impl ExplorationSet {
    /// Every entry of an `n_s × n_a` table, row-major.
    pub fn full(n_s: usize, n_a: usize) -> Self {
        Self { pairs: (0..n_s).flat_map(|i| (0..n_a).map(move |j| (i, j))).collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The anchor cross `{(s,a): s ∈ S♯ or a ∈ A♯}`, row-major.
pub fn build_omega(s_grid: &GridNet, a_grid: &GridNet) -> Result<ExplorationSet> {
    if s_grid.anchor_indices.is_empty() || a_grid.anchor_indices.is_empty() {
        return Err(Error::Config("both grids need anchor indices to build the exploration set".into()));
    }
    let mut row_anchor = vec![false; s_grid.len()];
    s_grid.anchor_indices.iter().for_each(|&i| row_anchor[i] = true);
    let mut col_anchor = vec![false; a_grid.len()];
    a_grid.anchor_indices.iter().for_each(|&j| col_anchor[j] = true);
    let anchor_cols: Vec<usize> = (0..a_grid.len()).filter(|&j| col_anchor[j]).collect();
    let mut pairs = Vec::with_capacity(
        s_grid.anchor_indices.len() * a_grid.len() + anchor_cols.len() * s_grid.len(),
    );
    for (i, &ri) in row_anchor.iter().enumerate() {
        if ri {
            pairs.extend((0..a_grid.len()).map(|j| (i, j)));
        } else {
            pairs.extend(anchor_cols.iter().map(|&j| (i, j)));
        }
    }
    Ok(ExplorationSet { pairs })
}
