//! Experiment drivers behind the CLI subcommands.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use lowrank_rl::engine::{
    default_schedule, finite_schedule, run_algorithm, table_schedule, ErrorTarget, MeMethod, MetricsTrace, QOracle,
    RunSettings, Schedule, ScheduleMode,
};
use lowrank_rl::envs::{MdpSpec, MOUNTAIN_CAR_GOAL};
use lowrank_rl::me::MeGuarantee;
use lowrank_rl::oracle::{analytic_proxy, approx_rank_report, bias_zeta_table, cached_proxy, QStarProxy};
use lowrank_rl::rng::{stream, Purpose};

use crate::config::{method_from, ExperimentConfig, QSource, ScheduleKind};
use crate::output::{self, fmt_f64, mean_std, Manifest};
use crate::HarnessError;

/// Environment variable naming the proxy cache directory.
pub const CACHE_ENV: &str = "LOWRANK_RL_CACHE";
pub const DEFAULT_CACHE_DIR: &str = ".lowrank-rl-cache";

pub fn cache_dir_from_env() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

/// Where and how an experiment writes.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    /// `None` disables the proxy cache.
    pub cache_dir: Option<PathBuf>,
}

impl Context {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { out: cfg.run.out.clone(), cache_dir: Some(cache_dir_from_env()) }
    }
}

pub fn build_env(cfg: &ExperimentConfig) -> Result<MdpSpec, HarnessError> {
    cfg.build_env().map_err(HarnessError::Config)
}

/// Schedule for the configured mode. The theory mode derives `c_me` from the
/// rank-1 guarantee unless it is set explicitly.
pub fn build_schedule(cfg: &ExperimentConfig, env: &MdpSpec) -> Result<Schedule, HarnessError> {
    let s = &cfg.schedule;
    Ok(match s.kind {
        ScheduleKind::Table => table_schedule(env, s.t_max, &s.table)?,
        ScheduleKind::Finite => finite_schedule(env, s.t_max, s.table.n_samples)?,
        ScheduleKind::Theory => {
            let (c_me, big) = match (&cfg.me.method, s.c_me) {
                (_, Some(c)) => (c, s.big_c_me.unwrap_or(cfg.anchors.r as f64)),
                (MeMethod::Rank1, None) => {
                    let g = MeGuarantee::rank1(env.r_max(), env.r_min(), env.gamma)?;
                    (g.c_me, s.big_c_me.unwrap_or(g.big_c_me))
                }
                _ => return Err(HarnessError::Config("schedule.c_me is required".into())),
            };
            default_schedule(env, c_me, big, s.t_max, s.delta, &s.table)?
        }
    })
}

pub fn run_settings(cfg: &ExperimentConfig, method: MeMethod, seed: u64) -> RunSettings {
    let mut st = RunSettings::new(method, cfg.anchors.r, seed);
    st.anchor_jitter = cfg.anchors.jitter;
    st.anchor_seed = cfg.anchors.seed;
    st.clip = cfg.run.clip;
    st
}

/// The configured `Q*` proxy: closed form, or fine-grid value iteration
/// through the cache.
pub fn load_proxy(cfg: &ExperimentConfig, env: &MdpSpec, ctx: &Context) -> Result<QStarProxy, HarnessError> {
    if cfg.proxy.analytic {
        return Ok(analytic_proxy(env, &cfg.proxy.vi.s_counts, &cfg.proxy.vi.a_counts)?);
    }
    if let Some(dir) = &ctx.cache_dir {
        output::ensure_dir(dir)?;
    }
    Ok(cached_proxy(env, &cfg.proxy.vi, ctx.cache_dir.as_deref())?)
}

/// Summary of the `oracle` subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub rows: usize,
    pub cols: usize,
    pub sweeps: usize,
    pub residual: f64,
    pub converged: bool,
    pub max_abs: f64,
}

/// Builds (or loads) the proxy and records a summary in the output directory.
pub fn build_oracle(cfg: &ExperimentConfig, ctx: &Context) -> Result<OracleSummary, HarnessError> {
    let env = build_env(cfg)?;
    let proxy = load_proxy(cfg, &env, ctx)?;
    let v = proxy.values();
    let summary = OracleSummary {
        rows: v.rows(),
        cols: v.cols(),
        sweeps: proxy.sweeps,
        residual: proxy.residual,
        converged: proxy.converged,
        max_abs: v.max_abs(),
    };
    output::ensure_dir(&ctx.out)?;
    let path = ctx.out.join("oracle.csv");
    output::write_rows(
        &path,
        &["rows", "cols", "sweeps", "residual", "converged", "max_abs"],
        [vec![
            summary.rows.to_string(),
            summary.cols.to_string(),
            summary.sweeps.to_string(),
            fmt_f64(summary.residual),
            summary.converged.to_string(),
            fmt_f64(summary.max_abs),
        ]],
    )?;
    manifest(cfg, "oracle", "none", &[], None, &[path], &ctx.out)?;
    Ok(summary)
}

fn manifest(
    cfg: &ExperimentConfig,
    command: &str,
    method: &str,
    seeds: &[u64],
    schedule: Option<&Schedule>,
    files: &[PathBuf],
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    Manifest {
        command: command.into(),
        config_hash: cfg.hash.clone(),
        env: cfg.env.name.clone(),
        method: method.into(),
        seeds: seeds.to_vec(),
        schedule_mode: schedule.map_or("none", |s| match s.mode {
            ScheduleMode::Theory => "theory",
            ScheduleMode::Table => "table",
            ScheduleMode::Finite => "finite",
        })
        .into(),
        theory_range_exceeded: schedule.is_some_and(|s| s.theory_range_exceeded),
        harness_version: env!("CARGO_PKG_VERSION").into(),
        files: output::file_entries(files, dir, &cfg.hash),
    }
    .write(dir)
}

/// Output of the `run` subcommand.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seeds: Vec<u64>,
    pub traces: Vec<MetricsTrace>,
    pub aggregate: Vec<output::AggregateRow>,
    pub files: Vec<PathBuf>,
    pub schedule: Schedule,
}

fn run_seeds(
    cfg: &ExperimentConfig,
    env: &Arc<MdpSpec>,
    schedule: &Schedule,
    method: &MeMethod,
    target: Option<&QStarProxy>,
) -> Result<Vec<(QOracle, MetricsTrace)>, HarnessError> {
    let seeds = cfg.run.seeds();
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            run_algorithm(
                env.clone(),
                schedule.clone(),
                run_settings(cfg, method.clone(), seed),
                target.map(|p| p as &dyn ErrorTarget),
            )
        })
        .collect();
    results.into_iter().map(|r| r.map_err(HarnessError::from)).collect()
}

/// Runs every seed, writes `seed_<s>.csv`, `aggregate.csv`, `timing.csv`
/// and `manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig, ctx: &Context) -> Result<RunOutcome, HarnessError> {
    let env = build_env(cfg)?;
    let schedule = build_schedule(cfg, &env)?;
    let proxy = load_proxy(cfg, &env, ctx)?;
    let env = Arc::new(env);
    let runs = run_seeds(cfg, &env, &schedule, &cfg.me.method, Some(&proxy))?;
    let traces: Vec<MetricsTrace> = runs.into_iter().map(|(_, t)| t).collect();
    let seeds = cfg.run.seeds();

    output::ensure_dir(&ctx.out)?;
    let mut files = Vec::new();
    for (seed, trace) in seeds.iter().zip(&traces) {
        let path = ctx.out.join(format!("seed_{seed}.csv"));
        output::write_seed_csv(&path, trace)?;
        files.push(path);
    }
    let aggregate = output::aggregate(&traces);
    let path = ctx.out.join("aggregate.csv");
    output::write_aggregate_csv(&path, &aggregate)?;
    files.push(path);
    let path = ctx.out.join("timing.csv");
    let timing = seeds
        .iter()
        .zip(&traces)
        .flat_map(|(s, tr)| tr.rows.iter().map(move |r| vec![s.to_string(), r.t.to_string(), format!("{:.3}", r.wall_ms)]));
    output::write_rows(&path, &output::TIMING_COLUMNS, timing)?;
    files.push(path);
    manifest(cfg, "run", cfg.me.method.name(), &seeds, Some(&schedule), &files, &ctx.out)?;
    Ok(RunOutcome { seeds, traces, aggregate, files, schedule })
}

/// One benchmarked estimator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchEntry {
    pub method: String,
    /// Hyperparameter label (`threshold_mult`, `lambda`, or `rank_tol`).
    pub param: f64,
    pub aggregate: Vec<output::AggregateRow>,
}

fn bench_candidates(cfg: &ExperimentConfig) -> Vec<(String, f64, MeMethod)> {
    let me = &cfg.me;
    let mut out = Vec::new();
    for name in &me.bench_methods {
        let params: Vec<f64> = match name.as_str() {
            "usvt" => me.usvt_thresholds.clone(),
            "soft_impute" => me.soft_impute_lambdas.clone(),
            _ => vec![me.anchor.rank_tol],
        };
        for p in params {
            let method = method_from(name, me.anchor, p, p, me.soft_impute_max_iters, me.soft_impute_tol)
                .expect("validated method name");
            out.push((name.clone(), p, method));
        }
    }
    out
}

/// Runs every method at the same per-iteration sample budget and writes
/// `me_bench.csv` and `me_bench_best.csv`.
pub fn me_benchmark(cfg: &ExperimentConfig, ctx: &Context) -> Result<Vec<BenchEntry>, HarnessError> {
    let forced: Vec<&str> = cfg
        .me
        .bench_methods
        .iter()
        .map(String::as_str)
        .filter(|m| (*m == "rank1" && cfg.anchors.r != 1) || (*m == "rank2" && cfg.anchors.r != 2))
        .collect();
    if !forced.is_empty() {
        return Err(HarnessError::Config(format!(
            "me.bench_methods: {} fix their own anchor count, which differs from anchors.r = {}; budgets would not match",
            forced.join(", "),
            cfg.anchors.r
        )));
    }
    let env = build_env(cfg)?;
    let schedule = build_schedule(cfg, &env)?;
    let proxy = load_proxy(cfg, &env, ctx)?;
    let env = Arc::new(env);
    let mut entries = Vec::new();
    for (name, param, method) in bench_candidates(cfg) {
        let runs = run_seeds(cfg, &env, &schedule, &method, Some(&proxy))?;
        let traces: Vec<MetricsTrace> = runs.into_iter().map(|(_, t)| t).collect();
        entries.push(BenchEntry { method: name, param, aggregate: output::aggregate(&traces) });
    }
    for e in &entries[1..] {
        let budgets = |x: &BenchEntry| x.aggregate.iter().map(|r| r.cumulative_samples.0).collect::<Vec<_>>();
        if budgets(e) != budgets(&entries[0]) {
            return Err(HarnessError::Runtime(format!(
                "sample budgets differ between {} and {}",
                entries[0].method, e.method
            )));
        }
    }

    output::ensure_dir(&ctx.out)?;
    let path = ctx.out.join("me_bench.csv");
    let rows = entries.iter().flat_map(|e| {
        e.aggregate.iter().map(move |r| {
            let f = |p: Option<(f64, f64)>, k: usize| output::fmt_opt(p.map(|x| if k == 0 { x.0 } else { x.1 }));
            vec![
                e.method.clone(),
                fmt_f64(e.param),
                r.t.to_string(),
                r.n.to_string(),
                fmt_f64(r.cumulative_samples.0),
                f(r.linf_error, 0),
                f(r.linf_error, 1),
                f(r.mean_error, 0),
                f(r.mean_error, 1),
            ]
        })
    });
    output::write_rows(&path, &output::BENCH_COLUMNS, rows)?;
    let best_path = ctx.out.join("me_bench_best.csv");
    output::write_rows(&best_path, &output::BENCH_BEST_COLUMNS, best_per_method(&entries).into_iter().map(|e| {
        let last = e.aggregate.last().expect("t_max ≥ 1");
        vec![
            e.method.clone(),
            fmt_f64(e.param),
            output::fmt_opt(last.mean_error.map(|x| x.0)),
            output::fmt_opt(last.linf_error.map(|x| x.0)),
        ]
    }))?;
    manifest(cfg, "me-bench", "bench", &cfg.run.seeds(), Some(&schedule), &[path, best_path], &ctx.out)?;
    Ok(entries)
}

/// Lowest final mean error per method; first listed wins ties.
pub fn best_per_method(entries: &[BenchEntry]) -> Vec<&BenchEntry> {
    let final_mean = |e: &BenchEntry| e.aggregate.last().and_then(|r| r.mean_error).map_or(f64::INFINITY, |x| x.0);
    let mut best: Vec<&BenchEntry> = Vec::new();
    for e in entries {
        match best.iter_mut().find(|b| b.method == e.method) {
            Some(b) if final_mean(e) < final_mean(b) => *b = e,
            Some(_) => {}
            None => best.push(e),
        }
    }
    best
}

/// Spectrum, effective ranks and `ζ_r` of the proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    pub sigmas: Vec<f64>,
    pub effective_ranks: Vec<(f64, usize)>,
    pub zeta: Vec<f64>,
    pub max_abs: f64,
}

impl RankOutcome {
    /// Share of the squared Frobenius norm in the top `k` singular values.
    pub fn mass(&self, k: usize) -> f64 {
        let total: f64 = self.sigmas.iter().map(|s| s * s).sum();
        self.sigmas.iter().take(k).map(|s| s * s).sum::<f64>() / total
    }
}

pub fn rank_diagnostics(cfg: &ExperimentConfig, ctx: &Context) -> Result<RankOutcome, HarnessError> {
    let env = build_env(cfg)?;
    let proxy = load_proxy(cfg, &env, ctx)?;
    let report = approx_rank_report(&proxy, &cfg.rank.deltas)?;
    let sigmas = report.spectrum.values().to_vec();
    let r_max = cfg.rank.max_r.min(sigmas.len());
    let zeta = bias_zeta_table(proxy.values(), r_max)?;
    let outcome = RankOutcome { sigmas, effective_ranks: report.effective_ranks, zeta, max_abs: proxy.values().max_abs() };

    output::ensure_dir(&ctx.out)?;
    let spectrum = ctx.out.join("spectrum.csv");
    let total: f64 = outcome.sigmas.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    output::write_rows(
        &spectrum,
        &["index", "sigma", "cumulative_mass"],
        outcome.sigmas.iter().enumerate().map(|(i, s)| {
            acc += s * s;
            vec![(i + 1).to_string(), fmt_f64(*s), fmt_f64(acc / total)]
        }),
    )?;
    let ranks = ctx.out.join("effective_rank.csv");
    output::write_rows(
        &ranks,
        &["delta", "r_star"],
        outcome.effective_ranks.iter().map(|(d, r)| vec![fmt_f64(*d), r.to_string()]),
    )?;
    let zeta = ctx.out.join("zeta.csv");
    output::write_rows(
        &zeta,
        &["r", "zeta", "zeta_relative"],
        outcome.zeta.iter().enumerate().map(|(i, z)| vec![(i + 1).to_string(), fmt_f64(*z), fmt_f64(z / outcome.max_abs)]),
    )?;
    manifest(cfg, "rank", "none", &[], None, &[spectrum, ranks, zeta], &ctx.out)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMetric {
    /// Mean `|θ|` in degrees over the trajectory.
    AngularDeviation,
    /// Steps until the goal predicate holds, capped at the horizon.
    TimeToGoal,
}

impl RolloutMetric {
    pub fn name(self) -> &'static str {
        match self {
            RolloutMetric::AngularDeviation => "angular_deviation_deg",
            RolloutMetric::TimeToGoal => "time_to_goal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub source: String,
    pub metric: RolloutMetric,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub values: Vec<f64>,
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Rollout rules for one task: metric, default start box, per-step angle.
struct Protocol {
    metric: RolloutMetric,
    init_low: Vec<f64>,
    init_high: Vec<f64>,
    angle: fn(&[f64]) -> f64,
    goal: fn(&[f64]) -> bool,
}

fn protocol(env: &MdpSpec) -> Result<Protocol, HarnessError> {
    let never = |_: &[f64]| false;
    let zero = |_: &[f64]| 0.0;
    Ok(match env.name.as_str() {
        "inverted_pendulum" => Protocol {
            metric: RolloutMetric::AngularDeviation,
            init_low: vec![-0.2, -0.2],
            init_high: vec![0.2, 0.2],
            angle: |s| s[0].abs(),
            goal: never,
        },
        "cart_pole" => Protocol {
            metric: RolloutMetric::AngularDeviation,
            init_low: vec![-0.05; 4],
            init_high: vec![0.05; 4],
            angle: |s| s[0].abs(),
            goal: never,
        },
        "acrobot" => Protocol {
            metric: RolloutMetric::AngularDeviation,
            init_low: vec![PI - 0.1, -0.1, -0.1, -0.1],
            init_high: vec![PI + 0.1, 0.1, 0.1, 0.1],
            angle: |s| wrap_angle(s[0] - PI).abs(),
            goal: never,
        },
        "mountain_car" => Protocol {
            metric: RolloutMetric::TimeToGoal,
            init_low: vec![-0.6, 0.0],
            init_high: vec![-0.4, 0.0],
            angle: zero,
            goal: |s| s[0] >= MOUNTAIN_CAR_GOAL,
        },
        "double_integrator" => Protocol {
            metric: RolloutMetric::TimeToGoal,
            init_low: vec![-1.0, -1.0],
            init_high: vec![1.0, 1.0],
            angle: zero,
            goal: |s| s[0].hypot(s[1]) <= 0.05,
        },
        other => return Err(HarnessError::Config(format!("no rollout protocol for environment `{other}`"))),
    })
}

/// Greedy-policy rollouts of `q`. Episode `k` draws its start state and
/// noise from the rollout stream `(seed, k)`, so sources share start states.
pub fn simulate(
    env: &MdpSpec,
    q: &QOracle,
    source: &str,
    episodes: usize,
    horizon: usize,
    seed: u64,
    init: Option<(&[f64], &[f64])>,
) -> Result<RolloutReport, HarnessError> {
    let p = protocol(env)?;
    let (lo, hi) = init.unwrap_or((&p.init_low, &p.init_high));
    let values: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, Purpose::Rollout, 0, k as u64);
            let mut s: Vec<f64> =
                lo.iter().zip(hi).map(|(&l, &h)| if l < h { rng.random_range(l..h) } else { l }).collect();
            env.state_space.project(&mut s);
            let mut deviation = 0.0;
            let mut steps = horizon;
            for step in 0..horizon {
                let a = q.greedy_action(&s).to_vec();
                s = env.sample_transition(&s, &a, &mut rng).0;
                deviation += (p.angle)(&s);
                if (p.goal)(&s) {
                    steps = step + 1;
                    break;
                }
            }
            match p.metric {
                RolloutMetric::AngularDeviation => (deviation / horizon as f64).to_degrees(),
                RolloutMetric::TimeToGoal => steps as f64,
            }
        })
        .collect();
    let (mean, std) = mean_std(&values);
    Ok(RolloutReport { source: source.into(), metric: p.metric, mean, std, episodes, horizon, values })
}

/// Learned and/or proxy greedy policies, written to `rollout.csv` and
/// `rollout_episodes.csv`. The learned `Q^(T)` comes from the first seed.
pub fn rollout(cfg: &ExperimentConfig, ctx: &Context, source: QSource) -> Result<Vec<RolloutReport>, HarnessError> {
    let env = build_env(cfg)?;
    protocol(&env)?;
    let ro = &cfg.rollout;
    let init = ro.init_low.as_deref().zip(ro.init_high.as_deref());
    let mut reports = Vec::new();
    let mut schedule = None;
    if matches!(source, QSource::Proxy | QSource::Both) {
        let proxy = load_proxy(cfg, &env, ctx)?;
        reports.push(simulate(&env, &proxy.oracle, "proxy", ro.episodes, ro.horizon, cfg.run.seed, init)?);
    }
    if matches!(source, QSource::Learned | QSource::Both) {
        let sched = build_schedule(cfg, &env)?;
        let env_arc = Arc::new(env.clone());
        let settings = run_settings(cfg, cfg.me.method.clone(), cfg.run.seed);
        let (q, _) = run_algorithm(env_arc, sched.clone(), settings, None)?;
        reports.push(simulate(&env, &q, "learned", ro.episodes, ro.horizon, cfg.run.seed, init)?);
        schedule = Some(sched);
    }

    output::ensure_dir(&ctx.out)?;
    let path = ctx.out.join("rollout.csv");
    output::write_rows(
        &path,
        &output::ROLLOUT_COLUMNS,
        reports.iter().map(|r| {
            vec![
                r.source.clone(),
                r.metric.name().into(),
                fmt_f64(r.mean),
                fmt_f64(r.std),
                r.episodes.to_string(),
                r.horizon.to_string(),
            ]
        }),
    )?;
    let episodes = ctx.out.join("rollout_episodes.csv");
    output::write_rows(
        &episodes,
        &output::EPISODE_COLUMNS,
        reports.iter().flat_map(|r| r.values.iter().enumerate().map(|(k, v)| vec![r.source.clone(), k.to_string(), fmt_f64(*v)])),
    )?;
    manifest(cfg, "rollout", cfg.me.method.name(), &[cfg.run.seed], schedule.as_ref(), &[path, episodes], &ctx.out)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lowrank_rl::discretize::GridNet;
    use lowrank_rl::envs::make_env;
    use lowrank_rl::linalg::DenseMatrix;

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
        assert!((wrap_angle(-PI) + PI).abs() < 1e-12);
    }

    #[test]
    fn time_to_goal_capped_at_horizon() {
        let env = make_env("mountain_car").unwrap();
        let s = GridNet::with_counts(&env.state_space, &[3, 3]).unwrap();
        let a = GridNet::with_counts(&env.action_space, &[1]).unwrap();
        let q = QOracle::new(s, a, DenseMatrix::zeros(9, 1)).unwrap();
        let r = simulate(&env, &q, "idle", 3, 25, 0, None).unwrap();
        assert_eq!(r.values, vec![25.0; 3]);
        assert_eq!((r.mean, r.std), (25.0, 0.0));
    }

    #[test]
    fn no_protocol_for_synthetic_task() {
        let env = make_env("synthetic_rank1").unwrap();
        let q = QOracle::zero(&env);
        assert!(matches!(simulate(&env, &q, "x", 1, 1, 0, None), Err(HarnessError::Config(_))));
    }
}
