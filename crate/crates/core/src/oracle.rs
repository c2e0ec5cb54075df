//! Reference Q-functions: value iteration on a fine grid with quadrature
//! over the noise, exact value iteration for finite MDPs, error metrics,
//! and spectral diagnostics.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::discretize::GridNet;
use crate::engine::{ErrorTarget, QOracle};
use crate::envs::{Dynamics, FiniteMdp, MdpSpec};
use crate::error::{Error, Result};
use crate::linalg::{effective_rank, svd, svd_spectrum, DenseMatrix, SingularSpectrum};

/// Nodes and weights of the `n`-point Gauss–Hermite rule for a standard
/// normal, via the eigen-decomposition of its Jacobi matrix. Weights sum
/// to 1.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("quadrature needs at least one node".into()));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok((pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect()))
}

/// Fine-grid stand-in for `Q*`.
#[derive(Debug, Clone, PartialEq)]
pub struct QStarProxy {
    pub oracle: QOracle,
    /// Final sup-norm Bellman residual.
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Residual after each sweep.
    pub residuals: Vec<f64>,
}

impl QStarProxy {
    pub fn values(&self) -> &DenseMatrix {
        self.oracle.values()
    }

    pub fn s_grid(&self) -> &GridNet {
        self.oracle.s_grid()
    }

    pub fn a_grid(&self) -> &GridNet {
        self.oracle.a_grid()
    }
}

/// Proxy tabulated from the task's closed-form `Q*` on a lattice.
pub fn analytic_proxy(env: &MdpSpec, s_counts: &[usize], a_counts: &[usize]) -> Result<QStarProxy> {
    let s_grid = GridNet::with_counts(&env.state_space, s_counts)?;
    let a_grid = GridNet::with_counts(&env.action_space, a_counts)?;
    let mut data = Vec::with_capacity(s_grid.len() * a_grid.len());
    for s in s_grid.points() {
        for a in a_grid.points() {
            data.push(env.analytic_q_star(s, a).ok_or_else(|| {
                Error::Config(format!("environment `{}` has no closed-form Q*", env.name))
            })?);
        }
    }
    let values = DenseMatrix::from_row_major(s_grid.len(), a_grid.len(), data)?;
    Ok(QStarProxy { oracle: QOracle::new(s_grid, a_grid, values)?, residual: 0.0, sweeps: 0, converged: true, residuals: Vec::new() })
}

/// Settings for [`fine_grid_vi`].
#[derive(Debug, Clone, PartialEq)]
pub struct ViSettings {
    pub s_counts: Vec<usize>,
    pub a_counts: Vec<usize>,
    pub noise_draws: usize,
    pub tol: f64,
    pub max_sweeps: usize,
}

/// Synchronous value iteration `Q ← R + γ Σ_q w_q max_a' Q(nn(step(s,a,ξ_q)), a')`
/// from `Q = 0`, with Gauss–Hermite nodes `ξ_q = μ + σ x_q`. Stops when the
/// sup-norm change of a sweep is at most `tol`.
///
/// Finite MDPs use their exact transition tensor instead.
pub fn fine_grid_vi(env: &MdpSpec, settings: &ViSettings) -> Result<QStarProxy> {
    if !(settings.tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol must be positive, got {}", settings.tol)));
    }
    if settings.max_sweeps == 0 {
        return Err(Error::InvalidInput("max_sweeps must be at least 1".into()));
    }
    if let Dynamics::Finite(mdp) = &env.dynamics {
        return finite_proxy(env, mdp, settings.tol, settings.max_sweeps);
    }
    let s_grid = GridNet::with_counts(&env.state_space, &settings.s_counts)?;
    let a_grid = GridNet::with_counts(&env.action_space, &settings.a_counts)?;
    let (ns, na) = (s_grid.len(), a_grid.len());
    if ns > u32::MAX as usize {
        return Err(Error::InvalidInput("state grid too large".into()));
    }
    let (nodes, weights) = if env.noise_sigma == 0.0 {
        (vec![0.0], vec![1.0])
    } else {
        gauss_hermite(settings.noise_draws)?
    };
    let nq = nodes.len();
    let noises: Vec<f64> = nodes.iter().map(|x| env.noise_mu + env.noise_sigma * x).collect();

    let mut reward = vec![0.0; ns * na];
    let mut next = vec![0u32; ns * na * nq];
    let d = env.state_space.dims();
    reward
        .par_chunks_mut(na)
        .zip(next.par_chunks_mut(na * nq))
        .enumerate()
        .for_each(|(i, (r_row, n_row))| {
            let s = s_grid.point(i);
            let mut buf = vec![0.0; d];
            for j in 0..na {
                let a = a_grid.point(j);
                r_row[j] = env.reward(s, a);
                for (q, &xi) in noises.iter().enumerate() {
                    env.step_into(s, a, xi, &mut buf);
                    n_row[j * nq + q] = s_grid.nearest_index(&buf) as u32;
                }
            }
        });

    let gamma = env.gamma;
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut residuals = Vec::new();
    let mut converged = false;
    while residuals.len() < settings.max_sweeps {
        let mut fresh = vec![0.0; ns * na];
        let residual = fresh
            .par_chunks_mut(na)
            .enumerate()
            .map(|(i, row)| {
                let mut worst = 0.0f64;
                for j in 0..na {
                    let idx = i * na + j;
                    let succ = &next[idx * nq..(idx + 1) * nq];
                    let ev: f64 = succ.iter().zip(&weights).map(|(&k, w)| w * v[k as usize]).sum();
                    let val = reward[idx] + gamma * ev;
                    worst = worst.max((val - q[idx]).abs());
                    row[j] = val;
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        q = fresh;
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = q[i * na..(i + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        residuals.push(residual);
        if residual <= settings.tol {
            converged = true;
            break;
        }
    }
    let values = DenseMatrix::from_row_major(ns, na, q)?;
    Ok(QStarProxy {
        oracle: QOracle::new(s_grid, a_grid, values)?,
        residual: *residuals.last().unwrap_or(&f64::INFINITY),
        sweeps: residuals.len(),
        converged,
        residuals,
    })
}

fn finite_proxy(env: &MdpSpec, mdp: &FiniteMdp, tol: f64, max_sweeps: usize) -> Result<QStarProxy> {
    let (q, residuals) = finite_vi_trace(mdp, tol, max_sweeps)?;
    let s_grid = GridNet::with_counts(&env.state_space, &[mdp.n_states])?;
    let a_grid = GridNet::with_counts(&env.action_space, &[mdp.n_actions])?;
    let target = stop_threshold(tol, mdp.gamma);
    let residual = *residuals.last().unwrap_or(&0.0);
    Ok(QStarProxy {
        oracle: QOracle::new(s_grid, a_grid, q)?,
        residual,
        sweeps: residuals.len(),
        converged: residual <= target,
        residuals,
    })
}

/// One application of the Bellman optimality operator of a finite MDP.
pub fn finite_bellman(mdp: &FiniteMdp, q: &DenseMatrix) -> DenseMatrix {
    let v: Vec<f64> = (0..mdp.n_states).map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    DenseMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        let ev: f64 = mdp.next_distribution(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
        mdp.reward[(s, a)] + mdp.gamma * ev
    })
}

fn stop_threshold(tol: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - gamma) / gamma
    }
}

/// Value iteration from zero with its per-sweep sup-norm residuals. Stops
/// once the residual guarantees `‖Q − Q*‖∞ ≤ tol`.
pub fn finite_vi_trace(mdp: &FiniteMdp, tol: f64, max_sweeps: usize) -> Result<(DenseMatrix, Vec<f64>)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol must be positive, got {tol}")));
    }
    let target = stop_threshold(tol, mdp.gamma);
    let mut q = DenseMatrix::zeros(mdp.n_states, mdp.n_actions);
    let mut residuals = Vec::new();
    while residuals.len() < max_sweeps {
        let next = finite_bellman(mdp, &q);
        let r = next.max_abs_diff(&q);
        q = next;
        residuals.push(r);
        if r <= target {
            break;
        }
    }
    Ok((q, residuals))
}

/// `Q*` of a finite MDP to within `tol` in sup norm.
pub fn finite_vi(mdp: &FiniteMdp, tol: f64) -> Result<DenseMatrix> {
    Ok(finite_vi_trace(mdp, tol, usize::MAX)?.0)
}

/// ℓ∞ and mean absolute error over a reference grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub linf: f64,
    pub mean: f64,
    pub grid_points: usize,
}

/// Evaluates `q` at every `(state, action)` of the proxy grid.
pub fn compare(q: &QOracle, proxy: &QStarProxy) -> ErrorReport {
    let s_idx: Vec<usize> = proxy.s_grid().points().map(|s| q.s_grid().nearest_index(s)).collect();
    let a_idx: Vec<usize> = proxy.a_grid().points().map(|a| q.a_grid().nearest_index(a)).collect();
    let truth = proxy.values();
    let est = q.values();
    let (linf, sum) = s_idx
        .par_iter()
        .enumerate()
        .map(|(i, &si)| {
            let row = truth.row(i);
            let erow = est.row(si);
            let mut worst = 0.0f64;
            let mut total = 0.0;
            for (j, &aj) in a_idx.iter().enumerate() {
                let e = (erow[aj] - row[j]).abs();
                worst = worst.max(e);
                total += e;
            }
            (worst, total)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0f64, 0.0), |(w, t), (wi, ti)| (w.max(wi), t + ti));
    let n = s_idx.len() * a_idx.len();
    ErrorReport { linf, mean: sum / n as f64, grid_points: n }
}

impl ErrorTarget for QStarProxy {
    fn errors(&self, q: &QOracle) -> (f64, f64) {
        let r = compare(q, self);
        (r.linf, r.mean)
    }
}

/// Singular spectrum of the proxy and the effective rank for each `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub spectrum: SingularSpectrum,
    pub effective_ranks: Vec<(f64, usize)>,
}

pub fn approx_rank_report(proxy: &QStarProxy, deltas: &[f64]) -> Result<RankReport> {
    let spectrum = svd_spectrum(proxy.values())?;
    let effective_ranks = deltas.iter().map(|&d| (d, effective_rank(&spectrum, d))).collect();
    Ok(RankReport { spectrum, effective_ranks })
}

/// `ζ_r` for `r = 1..=r_max`: the smallest max-abs gap between the matrix
/// and its rank-`k` SVD truncations, `k ≤ r`.
pub fn bias_zeta_table(m: &DenseMatrix, r_max: usize) -> Result<Vec<f64>> {
    let dec = svd(m)?;
    let full = dec.singular_values.len();
    let mut best = f64::INFINITY;
    let mut out = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let gap = if r >= full { 0.0 } else { dec.reconstruct(r).max_abs_diff(m) };
        best = best.min(gap);
        out.push(best);
    }
    Ok(out)
}

/// `ζ_r` of the proxy table; see [`bias_zeta_table`].
pub fn bias_zeta(proxy: &QStarProxy, r: usize) -> Result<f64> {
    if r == 0 {
        return Ok(proxy.values().max_abs());
    }
    Ok(*bias_zeta_table(proxy.values(), r)?.last().expect("r ≥ 1"))
}

const CACHE_MAGIC: &[u8; 8] = b"LRQPROXY";
const CACHE_VERSION: u32 = 1;

/// Stable 64-bit key of everything that determines a proxy.
pub fn proxy_key(env: &MdpSpec, settings: &ViSettings) -> u64 {
    let desc = format!(
        "{}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
        env.name,
        env.dynamics,
        env.state_space,
        env.action_space,
        env.gamma.to_bits(),
        env.tau.to_bits(),
        env.noise_mu.to_bits(),
        env.noise_sigma.to_bits(),
        settings.s_counts,
        settings.a_counts,
        settings.noise_draws,
        settings.tol.to_bits(),
        settings.max_sweeps,
        CACHE_VERSION,
    );
    let digest = Sha256::digest(desc.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Writes the proxy as: magic `LRQPROXY`, `u32` version, `u64` key,
/// `u64` rows, `u64` cols, `f64` γ, `f64` tol, `f64` residual, `u64`
/// sweeps, `u8` converged, then `rows·cols` row-major `f64`. All
/// little-endian.
pub fn write_proxy_cache(path: &Path, key: u64, env: &MdpSpec, settings: &ViSettings, proxy: &QStarProxy) -> Result<()> {
    let (rows, cols) = proxy.values().shape();
    let mut buf = Vec::with_capacity(64 + rows * cols * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&key.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    buf.extend_from_slice(&env.gamma.to_le_bytes());
    buf.extend_from_slice(&settings.tol.to_le_bytes());
    buf.extend_from_slice(&proxy.residual.to_le_bytes());
    buf.extend_from_slice(&(proxy.sweeps as u64).to_le_bytes());
    buf.push(proxy.converged as u8);
    for v in proxy.values().as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a cache file written by [`write_proxy_cache`]. Returns `None` when
/// the file is missing or was written for another key.
pub fn read_proxy_cache(path: &Path, key: u64, env: &MdpSpec, settings: &ViSettings) -> Result<Option<QStarProxy>> {
    let mut bytes = Vec::new();
    match fs::File::open(path) {
        Ok(mut f) => f.read_to_end(&mut bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(Error::Io(format!("{}: not a proxy cache file", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CACHE_VERSION || r.u64()? != key {
        return Ok(None);
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let _gamma = r.f64()?;
    let _tol = r.f64()?;
    let residual = r.f64()?;
    let sweeps = r.u64()? as usize;
    let converged = r.take(1)?[0] != 0;
    let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Io(format!("{}: trailing bytes in proxy cache", path.display())));
    }
    let (s_grid, a_grid) = if let Dynamics::Finite(mdp) = &env.dynamics {
        (
            GridNet::with_counts(&env.state_space, &[mdp.n_states])?,
            GridNet::with_counts(&env.action_space, &[mdp.n_actions])?,
        )
    } else {
        (
            GridNet::with_counts(&env.state_space, &settings.s_counts)?,
            GridNet::with_counts(&env.action_space, &settings.a_counts)?,
        )
    };
    let values = DenseMatrix::from_row_major(rows, cols, data)?;
    Ok(Some(QStarProxy { oracle: QOracle::new(s_grid, a_grid, values)?, residual, sweeps, converged, residuals: Vec::new() }))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Io("truncated proxy cache".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads the proxy from `cache_dir` or computes and stores it.
pub fn cached_proxy(env: &MdpSpec, settings: &ViSettings, cache_dir: Option<&Path>) -> Result<QStarProxy> {
    let key = proxy_key(env, settings);
    let path = cache_dir.map(|d| d.join(format!("{}-{key:016x}.bin", env.name)));
    if let Some(p) = &path {
        if let Some(proxy) = read_proxy_cache(p, key, env, settings)? {
            return Ok(proxy);
        }
    }
    let proxy = fine_grid_vi(env, settings)?;
    if let Some(p) = &path {
        write_proxy_cache(p, key, env, settings, &proxy)?;
    }
    Ok(proxy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, make_finite_mdp, FiniteMdpParams};

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(5).unwrap();
        let m = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-14);
        assert!(m(1).abs() < 1e-14);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-12);
        assert!((m(8) - 105.0).abs() < 1e-9);
        assert_eq!(gauss_hermite(1).unwrap(), (vec![0.0], vec![1.0]));
    }

    #[test]
    fn finite_examples() {
        let single = make_finite_mdp("single_state", &FiniteMdpParams::default()).unwrap();
        assert!((finite_vi(&single, 1e-12).unwrap()[(0, 0)] - 2.0).abs() < 1e-12);
        let chain = make_finite_mdp("chain", &FiniteMdpParams { n_states: 2, ..Default::default() }).unwrap();
        let q = finite_vi(&chain, 1e-12).unwrap();
        assert!((q[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((q[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_proxy_is_reward() {
        let mut env = make_env("inverted_pendulum").unwrap();
        env.set_param("gamma", 0.0).unwrap();
        let settings = ViSettings { s_counts: vec![9, 9], a_counts: vec![5], noise_draws: 5, tol: 1e-9, max_sweeps: 10 };
        let p = fine_grid_vi(&env, &settings).unwrap();
        for i in 0..p.s_grid().len() {
            for j in 0..p.a_grid().len() {
                assert_eq!(p.values()[(i, j)], env.reward(p.s_grid().point(i), p.a_grid().point(j)));
            }
        }
        assert!(p.converged);
    }

    #[test]
    fn compare_examples() {
        let env = make_env("double_integrator").unwrap();
        let settings = ViSettings { s_counts: vec![6, 6], a_counts: vec![3], noise_draws: 3, tol: 1e-6, max_sweeps: 500 };
        let p = fine_grid_vi(&env, &settings).unwrap();
        let same = compare(&p.oracle, &p);
        assert_eq!((same.linf, same.mean), (0.0, 0.0));
        let shifted = QOracle::new(p.s_grid().clone(), p.a_grid().clone(), p.values().map(|v| v + 0.5)).unwrap();
        let r = compare(&shifted, &p);
        assert!((r.linf - 0.5).abs() < 1e-12 && (r.mean - 0.5).abs() < 1e-12);
        assert_eq!(r.grid_points, 108);
    }

    #[test]
    fn zeta_examples() {
        let f = [1.0, -0.5, 0.25, 1.0];
        let g = [0.5, 1.0, -1.0];
        let m = DenseMatrix::outer(&f, &g);
        assert!(bias_zeta_table(&m, 3).unwrap().iter().all(|&z| z < 1e-12));
        let z = bias_zeta_table(&DenseMatrix::identity(3), 3).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12 && z[2] == 0.0);
    }

    #[test]
    fn cache_roundtrip_is_bit_exact() {
        let env = make_env("mountain_car").unwrap();
        let settings = ViSettings { s_counts: vec![7, 5], a_counts: vec![4], noise_draws: 3, tol: 1e-3, max_sweeps: 40 };
        let dir = tempfile::tempdir().unwrap();
        let p = cached_proxy(&env, &settings, Some(dir.path())).unwrap();
        let again = cached_proxy(&env, &settings, Some(dir.path())).unwrap();
        assert_eq!(p.values(), again.values());
        assert_eq!((p.residual, p.sweeps, p.converged), (again.residual, again.sweeps, again.converged));
        let mut other = settings.clone();
        other.tol = 2e-3;
        let key = proxy_key(&env, &settings);
        let path = dir.path().join(format!("mountain_car-{key:016x}.bin"));
        assert!(read_proxy_cache(&path, proxy_key(&env, &other), &env, &other).unwrap().is_none());
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(read_proxy_cache(&path, key, &env, &settings).is_err());
    }
}
