//! The iterative loop: discretize, explore the anchor cross with one-step
//! lookahead, complete the table with a matrix estimator, and generalize by
//! nearest-neighbour interpolation.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::discretize::{augment, build_omega, cells_for, select_anchors, AnchorSet, ExplorationSet, GridNet};
use crate::envs::{GenerativeModel, MdpSpec};
use crate::error::{Error, Result};
use crate::linalg::{svd_spectrum, DenseMatrix};
use crate::me::{
    me_rank1, me_rank2_explicit, me_rankr_anchor, me_soft_impute, me_usvt, AnchorOptions, MaskedMatrix,
    PIVOT_REL_FLOOR,
};
use crate::rng::{stream, Purpose};

/// Piecewise-constant Q-function on a product grid, evaluated by 1-NN in
/// states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct QOracle {
    s_grid: GridNet,
    a_grid: GridNet,
    values: DenseMatrix,
    v: Vec<f64>,
    greedy: Vec<usize>,
}

impl QOracle {
    pub fn new(s_grid: GridNet, a_grid: GridNet, values: DenseMatrix) -> Result<Self> {
        if values.shape() != (s_grid.len(), a_grid.len()) {
            return Err(Error::InvalidInput(format!(
                "table is {:?} but grids are {}x{}",
                values.shape(),
                s_grid.len(),
                a_grid.len()
            )));
        }
        let mut v = Vec::with_capacity(values.rows());
        let mut greedy = Vec::with_capacity(values.rows());
        for i in 0..values.rows() {
            let (j, m) = argmax(values.row(i));
            v.push(m);
            greedy.push(j);
        }
        Ok(Self { s_grid, a_grid, values, v, greedy })
    }

    /// `Q^(0) ≡ 0` on single-cell grids.
    pub fn zero(env: &MdpSpec) -> Self {
        let s = GridNet::with_counts(&env.state_space, &vec![1; env.state_space.dims()]).expect("unit grid");
        let a = GridNet::with_counts(&env.action_space, &vec![1; env.action_space.dims()]).expect("unit grid");
        Self::new(s, a, DenseMatrix::zeros(1, 1)).expect("1x1 table")
    }

    pub fn s_grid(&self) -> &GridNet {
        &self.s_grid
    }

    pub fn a_grid(&self) -> &GridNet {
        &self.a_grid
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    #[inline]
    pub fn eval(&self, s: &[f64], a: &[f64]) -> f64 {
        self.values[(self.s_grid.nearest_index(s), self.a_grid.nearest_index(a))]
    }

    /// `V(s) = max` over the action grid; see [`v_of`].
    #[inline]
    pub fn value(&self, s: &[f64]) -> f64 {
        self.v[self.s_grid.nearest_index(s)]
    }

    /// Row maxima of the table, one per state grid point.
    pub fn state_values(&self) -> &[f64] {
        &self.v
    }

    /// Greedy action: argmax over the action grid, lowest index on ties.
    pub fn greedy_action(&self, s: &[f64]) -> &[f64] {
        self.a_grid.point(self.greedy[self.s_grid.nearest_index(s)])
    }
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (j, x);
        }
    }
    best
}

/// `V(s) = max_a Q(s, a)` over the oracle's action grid.
pub fn v_of(q: &QOracle, s: &[f64]) -> f64 {
    q.value(s)
}

/// Empirical Bellman backup `R(s,a) + γ/N · Σ V(s'_i)` from `n` fresh
/// generative-model samples.
pub fn lookahead<R: Rng + ?Sized>(model: &GenerativeModel, s: &[f64], a: &[f64], v: &QOracle, n: usize, rng: &mut R) -> f64 {
    let mut next = [0.0f64; 8];
    let d = model.spec().state_space.dims();
    let mut heap;
    let buf: &mut [f64] = if d <= next.len() {
        &mut next[..d]
    } else {
        heap = vec![0.0; d];
        &mut heap
    };
    let mut acc = 0.0;
    let mut reward = model.spec().reward(s, a);
    for _ in 0..n {
        reward = model.sample_into(s, a, rng, buf);
        acc += v.value(buf);
    }
    reward + model.spec().gamma * acc / n.max(1) as f64
}

/// Grid sizes and sample count for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationPlan {
    /// Target covering radius (normalized coordinates).
    pub beta: f64,
    pub state_counts: Vec<usize>,
    pub action_counts: Vec<usize>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Theory,
    Table,
    Finite,
}

/// Per-iteration discretization radii and sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub t_max: usize,
    /// `α = 2γ c_me`.
    pub contraction: f64,
    pub delta: f64,
    pub mode: ScheduleMode,
    /// Set when `α ≥ 1`, i.e. the geometric rules do not contract.
    pub theory_range_exceeded: bool,
    pub plans: Vec<IterationPlan>,
}

impl Schedule {
    pub fn plan(&self, t: usize) -> &IterationPlan {
        &self.plans[t - 1]
    }
}

/// Practical schedule: `β` halves from `β^(1)` and grids stop growing at
/// the per-dimension caps; `N` is constant unless a table is given.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    /// Defaults to `diameter / 8` of the state space.
    pub beta1: Option<f64>,
    pub max_state_counts: Vec<usize>,
    pub max_action_counts: Vec<usize>,
    pub n_samples: usize,
    pub beta_table: Option<Vec<f64>>,
    pub n_table: Option<Vec<usize>>,
}

impl TableSpec {
    pub fn new(max_state_counts: Vec<usize>, max_action_counts: Vec<usize>, n_samples: usize) -> Self {
        Self { beta1: None, max_state_counts, max_action_counts, n_samples, beta_table: None, n_table: None }
    }
}

fn counts_for(d: usize, beta: f64, caps: Option<&[usize]>) -> Vec<usize> {
    let n = cells_for(d, beta);
    (0..d).map(|k| caps.map_or(n, |c| n.min(c[k]))).collect()
}

pub fn table_schedule(env: &MdpSpec, t_max: usize, spec: &TableSpec) -> Result<Schedule> {
    if t_max == 0 {
        return Err(Error::Config("schedule needs t_max ≥ 1".into()));
    }
    let (ds, da) = (env.state_space.dims(), env.action_space.dims());
    if spec.max_state_counts.len() != ds || spec.max_action_counts.len() != da {
        return Err(Error::Config(format!("grid caps need {ds} state and {da} action entries")));
    }
    if spec.max_state_counts.iter().chain(&spec.max_action_counts).any(|&c| c == 0) {
        return Err(Error::Config("grid caps must be positive".into()));
    }
    if let Some(b) = &spec.beta_table {
        if b.len() != t_max {
            return Err(Error::Config(format!("beta table has {} entries, expected {t_max}", b.len())));
        }
        if b.iter().any(|&x| !(x > 0.0)) || b.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("beta table must be positive and nonincreasing".into()));
        }
    }
    if let Some(n) = &spec.n_table {
        if n.len() != t_max {
            return Err(Error::Config(format!("sample table has {} entries, expected {t_max}", n.len())));
        }
        if n.iter().any(|&x| x == 0) || n.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("sample table must be positive and nondecreasing".into()));
        }
    }
    if spec.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let beta1 = spec.beta1.unwrap_or(env.state_space.diameter() / 8.0);
    if !(beta1 > 0.0) {
        return Err(Error::Config("beta1 must be positive".into()));
    }
    let plans = (1..=t_max)
        .map(|t| {
            let beta = spec.beta_table.as_ref().map_or(beta1 * 0.5f64.powi(t as i32 - 1), |b| b[t - 1]);
            IterationPlan {
                beta,
                state_counts: counts_for(ds, beta, Some(&spec.max_state_counts)),
                action_counts: counts_for(da, beta, Some(&spec.max_action_counts)),
                n_samples: spec.n_table.as_ref().map_or(spec.n_samples, |n| n[t - 1]),
            }
        })
        .collect();
    Ok(Schedule { t_max, contraction: f64::NAN, delta: f64::NAN, mode: ScheduleMode::Table, theory_range_exceeded: false, plans })
}

/// Rules `β^(t) = V/(8L)·α^t` and
/// `N^(t) = ⌈8/α^{2(t−1)} · ln(2|Ω^(t)|T/δ)⌉` with `α = 2γ c_me`, where
/// `|Ω^(t)|` is bounded by `C_me(|S^(t)| + |A^(t)|)`. `V` is
/// [`MdpSpec::value_bound`]. When `α ≥ 1` the table schedule is returned
/// instead, flagged.
pub fn default_schedule(
    env: &MdpSpec,
    c_me: f64,
    big_c_me: f64,
    t_max: usize,
    delta: f64,
    fallback: &TableSpec,
) -> Result<Schedule> {
    if t_max == 0 {
        return Err(Error::Config("schedule needs t_max ≥ 1".into()));
    }
    if !(c_me > 0.0) || !(big_c_me > 0.0) {
        return Err(Error::Config("c_me and C_me must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0,1), got {delta}")));
    }
    let alpha = 2.0 * env.gamma * c_me;
    if alpha >= 1.0 {
        let mut s = table_schedule(env, t_max, fallback)?;
        s.contraction = alpha;
        s.delta = delta;
        s.theory_range_exceeded = true;
        return Ok(s);
    }
    let (ds, da) = (env.state_space.dims(), env.action_space.dims());
    let v = env.value_bound();
    let plans = (1..=t_max)
        .map(|t| {
            let beta = v / (8.0 * env.lipschitz_l) * alpha.powi(t as i32);
            let state_counts = counts_for(ds, beta, None);
            let action_counts = counts_for(da, beta, None);
            let s_len: usize = state_counts.iter().product();
            let a_len: usize = action_counts.iter().product();
            let omega = big_c_me * (s_len + a_len) as f64;
            let n = 8.0 / alpha.powi(2 * (t as i32 - 1)) * (2.0 * omega * t_max as f64 / delta).ln();
            IterationPlan { beta, state_counts, action_counts, n_samples: n.ceil().max(1.0) as usize }
        })
        .collect();
    Ok(Schedule { t_max, contraction: alpha, delta, mode: ScheduleMode::Theory, theory_range_exceeded: false, plans })
}

/// Finite spaces: grids are the full state and action sets every iteration.
pub fn finite_schedule(env: &MdpSpec, t_max: usize, n_samples: usize) -> Result<Schedule> {
    if !env.is_finite() {
        return Err(Error::Config("finite schedule requires a finite MDP".into()));
    }
    if t_max == 0 || n_samples == 0 {
        return Err(Error::Config("t_max and n_samples must be at least 1".into()));
    }
    let ns = env.state_space.range(0).round() as usize;
    let na = env.action_space.range(0).round() as usize;
    let plan = IterationPlan { beta: 0.0, state_counts: vec![ns], action_counts: vec![na], n_samples };
    Ok(Schedule {
        t_max,
        contraction: f64::NAN,
        delta: f64::NAN,
        mode: ScheduleMode::Finite,
        theory_range_exceeded: false,
        plans: vec![plan; t_max],
    })
}

/// Matrix estimator used after exploration.
#[derive(Debug, Clone, PartialEq)]
pub enum MeMethod {
    /// Explore every entry; no estimation.
    None,
    Rank1,
    Rank2,
    RankR(AnchorOptions),
    Usvt { threshold_mult: f64 },
    SoftImpute { lambda: f64, max_iters: usize, tol: f64 },
}

impl MeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            MeMethod::None => "none",
            MeMethod::Rank1 => "rank1",
            MeMethod::Rank2 => "rank2",
            MeMethod::RankR(_) => "rankr",
            MeMethod::Usvt { .. } => "usvt",
            MeMethod::SoftImpute { .. } => "soft_impute",
        }
    }

    fn uses_anchor_cross(&self) -> bool {
        matches!(self, MeMethod::Rank1 | MeMethod::Rank2 | MeMethod::RankR(_))
    }
}

/// Everything besides the environment and schedule that fixes a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub method: MeMethod,
    /// Anchors per space (`|S♯| = |A♯|`); forced to 1 or 2 for the explicit
    /// rank-1/rank-2 estimators.
    pub n_anchors: usize,
    pub anchor_jitter: f64,
    /// Seed for anchor placement; defaults to the master seed.
    pub anchor_seed: Option<u64>,
    pub seed: u64,
    /// Clip estimates into `[−V, V]` with `V` = [`MdpSpec::value_bound`].
    pub clip: bool,
}

impl RunSettings {
    pub fn new(method: MeMethod, n_anchors: usize, seed: u64) -> Self {
        Self { method, n_anchors, anchor_jitter: 1.0, anchor_seed: None, seed, clip: true }
    }

    fn anchor_count(&self) -> usize {
        match self.method {
            MeMethod::Rank1 => 1,
            MeMethod::Rank2 => 2,
            _ => self.n_anchors,
        }
    }
}

/// One iteration's bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub t: usize,
    pub s_size: usize,
    pub a_size: usize,
    pub omega_size: usize,
    pub n_samples: usize,
    pub samples: u64,
    pub cumulative_samples: u64,
    /// Rank certificate of the sampled anchor block (anchor methods only).
    pub sigma_r: Option<f64>,
    pub linf_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub wall_ms: f64,
}

/// Rows of [`IterationStats`] for `t = 1..T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTrace {
    pub rows: Vec<IterationStats>,
}

/// Anchors for a run: drawn from the anchor stream, and snapped onto the
/// integer lattice for finite MDPs.
pub fn run_anchors(env: &MdpSpec, settings: &RunSettings) -> Result<AnchorSet> {
    let seed = settings.anchor_seed.unwrap_or(settings.seed);
    let mut rng = stream(seed, Purpose::Anchors, 0, 0);
    let r = settings.anchor_count();
    let mut anchors = select_anchors(&env.state_space, &env.action_space, r, settings.anchor_jitter, &mut rng)?;
    if env.is_finite() {
        let snap = |v: &mut Vec<Vec<f64>>| v.iter_mut().for_each(|p| p.iter_mut().for_each(|x| *x = x.round()));
        snap(&mut anchors.states);
        snap(&mut anchors.actions);
    }
    Ok(anchors)
}

/// Holds the generative model and fixed per-run state.
pub struct Engine {
    model: GenerativeModel,
    schedule: Schedule,
    settings: RunSettings,
    anchors: AnchorSet,
}

impl Engine {
    pub fn new(env: Arc<MdpSpec>, schedule: Schedule, settings: RunSettings) -> Result<Self> {
        if settings.anchor_count() == 0 {
            return Err(Error::Config("at least one anchor is required".into()));
        }
        let anchors = run_anchors(&env, &settings)?;
        Ok(Self { model: GenerativeModel::new(env), schedule, settings, anchors })
    }

    pub fn env(&self) -> &MdpSpec {
        self.model.spec()
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Generative-model calls made so far.
    pub fn samples_drawn(&self) -> u64 {
        self.model.samples()
    }

    /// Runs iteration `t` from `q_prev`.
    pub fn run_iteration(&mut self, q_prev: &QOracle, t: usize) -> Result<(QOracle, IterationStats)> {
        self.iteration(q_prev, t).map_err(|e| Error::Iteration { iteration: t, source: Box::new(e) })
    }

    fn iteration(&mut self, q_prev: &QOracle, t: usize) -> Result<(QOracle, IterationStats)> {
        let start = Instant::now();
        if t == 0 || t > self.schedule.t_max {
            return Err(Error::Config(format!("iteration {t} outside 1..={}", self.schedule.t_max)));
        }
        let plan = self.schedule.plan(t).clone();
        let env = self.model.spec();
        let s_grid = augment(&GridNet::with_counts(&env.state_space, &plan.state_counts)?, &self.anchors.states)?;
        let a_grid = augment(&GridNet::with_counts(&env.action_space, &plan.action_counts)?, &self.anchors.actions)?;
        let (ns, na) = (s_grid.len(), a_grid.len());
        let cross = build_omega(&s_grid, &a_grid)?;
        let omega = match &self.settings.method {
            MeMethod::None => ExplorationSet::full(ns, na),
            m if m.uses_anchor_cross() => cross,
            _ => {
                let mut rng = stream(self.settings.seed, Purpose::BaselineMask, t as u64, 0);
                let mut flat = sample_indices(&mut rng, ns * na, cross.len()).into_vec();
                flat.sort_unstable();
                ExplorationSet { pairs: flat.into_iter().map(|k| (k / na, k % na)).collect() }
            }
        };

        let before = self.model.samples();
        let model = &self.model;
        let seed = self.settings.seed;
        let n = plan.n_samples;
        let explored: Vec<f64> = omega
            .pairs
            .par_iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let mut rng = stream(seed, Purpose::Explore, t as u64, k as u64);
                lookahead(model, s_grid.point(i), a_grid.point(j), q_prev, n, &mut rng)
            })
            .collect();
        let samples = self.model.samples() - before;

        let mut qhat = MaskedMatrix::unobserved(ns, na);
        for (&(i, j), &v) in omega.pairs.iter().zip(&explored) {
            qhat.set(i, j, v);
        }
        let bound = env.value_bound();
        let rows = s_grid.anchor_indices();
        let cols = a_grid.anchor_indices();
        let (estimate, sigma_r) = match &self.settings.method {
            MeMethod::None => (qhat.values().clone(), None),
            MeMethod::Rank1 => {
                let pivot = qhat.values()[(rows[0], cols[0])].abs();
                (me_rank1(&qhat, rows[0], cols[0], PIVOT_REL_FLOOR * bound)?, Some(pivot))
            }
            MeMethod::Rank2 => {
                if rows.len() < 2 || cols.len() < 2 {
                    return Err(Error::DegenerateAnchor("rank-2 estimator needs two distinct anchors per space".into()));
                }
                let block = qhat.values().select(&rows[..2], &cols[..2]);
                let sigma = svd_spectrum(&block)?.sigma(2);
                (me_rank2_explicit(&qhat, [rows[0], rows[1]], [cols[0], cols[1]], PIVOT_REL_FLOOR)?, Some(sigma))
            }
            MeMethod::RankR(opts) => {
                let mut opts = *opts;
                opts.min_sigma_r = opts.min_sigma_r.max(1e-6 * bound);
                let fit = me_rankr_anchor(&qhat, rows, cols, &opts)?;
                (fit.estimate, Some(fit.sigma_r))
            }
            MeMethod::Usvt { threshold_mult } => {
                let p = qhat.observed_fraction();
                (me_usvt(&qhat, p, *threshold_mult, None)?, None)
            }
            MeMethod::SoftImpute { lambda, max_iters, tol } => {
                (me_soft_impute(&qhat, *lambda, *max_iters, *tol, None)?.estimate, None)
            }
        };
        let estimate = if self.settings.clip { estimate.map(|v| v.clamp(-bound, bound)) } else { estimate };
        if !estimate.is_finite() {
            return Err(Error::DegenerateAnchor("estimator produced non-finite values".into()));
        }
        self.anchors.rank_certificate = sigma_r;
        let q = QOracle::new(s_grid, a_grid, estimate)?;
        let stats = IterationStats {
            t,
            s_size: ns,
            a_size: na,
            omega_size: omega.len(),
            n_samples: n,
            samples,
            cumulative_samples: 0,
            sigma_r,
            linf_error: None,
            mean_error: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((q, stats))
    }
}

/// Error of a Q-function against a reference table.
pub trait ErrorTarget {
    /// `(ℓ∞, mean)` absolute error of `q` over the reference grid.
    fn errors(&self, q: &QOracle) -> (f64, f64);
}

/// Runs `T` iterations from `Q^(0) ≡ 0`. Errors against `target` are
/// recorded per iteration when given.
pub fn run_algorithm(
    env: Arc<MdpSpec>,
    schedule: Schedule,
    settings: RunSettings,
    target: Option<&dyn ErrorTarget>,
) -> Result<(QOracle, MetricsTrace)> {
    let t_max = schedule.t_max;
    let mut engine = Engine::new(env, schedule, settings)?;
    let mut q = QOracle::zero(engine.env());
    let mut trace = MetricsTrace::default();
    let mut cumulative = 0u64;
    for t in 1..=t_max {
        let (next, mut stats) = engine.run_iteration(&q, t)?;
        cumulative += stats.samples;
        stats.cumulative_samples = cumulative;
        if let Some(target) = target {
            let (linf, mean) = target.errors(&next);
            stats.linf_error = Some(linf);
            stats.mean_error = Some(mean);
        }
        trace.rows.push(stats);
        q = next;
    }
    Ok((q, trace))
}
