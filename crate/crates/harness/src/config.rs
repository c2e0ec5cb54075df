//! Experiment configuration (TOML). Every problem found is collected and
//! reported together; unknown keys are errors.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use lowrank_rl::engine::{MeMethod, TableSpec};
use lowrank_rl::envs::{make_env, make_finite_mdp, FiniteMdpParams, MdpSpec};
use lowrank_rl::me::AnchorOptions;
use lowrank_rl::oracle::ViSettings;

/// All validation failures of a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub name: String,
    /// Scalar overrides passed to `MdpSpec::set_param`, in file order.
    pub params: Vec<(String, f64)>,
    pub state_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub action_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub finite_kind: Option<String>,
    pub finite: FiniteMdpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeConfig {
    pub method: MeMethod,
    /// Methods and hyperparameter grids compared by `me-bench`.
    pub bench_methods: Vec<String>,
    pub usvt_thresholds: Vec<f64>,
    pub soft_impute_lambdas: Vec<f64>,
    pub soft_impute_max_iters: usize,
    pub soft_impute_tol: f64,
    pub anchor: AnchorOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Table,
    Theory,
    Finite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub table: TableSpec,
    pub delta: f64,
    /// Overrides the amplification constant used by the theory schedule.
    pub c_me: Option<f64>,
    pub big_c_me: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub r: usize,
    pub jitter: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub vi: ViSettings,
    /// Use the task's closed-form `Q*` when it has one.
    pub analytic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_seeds: usize,
    pub out: PathBuf,
    pub clip: bool,
}

impl RunConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.seed + k).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QSource {
    Learned,
    Proxy,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub source: QSource,
    pub init_low: Option<Vec<f64>>,
    pub init_high: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankConfig {
    pub deltas: Vec<f64>,
    pub max_r: usize,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub me: MeConfig,
    pub schedule: ScheduleConfig,
    pub anchors: AnchorConfig,
    pub proxy: ProxyConfig,
    pub run: RunConfig,
    pub rollout: RolloutConfig,
    pub rank: RankConfig,
    /// SHA-256 of the source text, hex.
    pub hash: String,
}

const ENV_KEYS: &[&str] = &[
    "name", "state_lower", "state_upper", "action_lower", "action_upper", "finite_kind", "n_states", "n_actions",
    "rewards", "finite_seed",
];
const ME_KEYS: &[&str] = &[
    "method", "rank_tol", "rank", "min_sigma_r", "threshold_mult", "lambda", "max_iters", "tol", "bench_methods",
    "usvt_thresholds", "soft_impute_lambdas",
];
const SCHEDULE_KEYS: &[&str] = &[
    "mode", "t_max", "n_samples", "beta1", "max_state_counts", "max_action_counts", "beta_table", "n_table", "delta",
    "c_me", "big_c_me",
];
const ANCHOR_KEYS: &[&str] = &["r", "jitter", "seed"];
const PROXY_KEYS: &[&str] = &["state_counts", "action_counts", "noise_draws", "tol", "max_sweeps", "analytic"];
const RUN_KEYS: &[&str] = &["seed", "seeds", "out", "clip"];
const ROLLOUT_KEYS: &[&str] = &["episodes", "horizon", "source", "init_low", "init_high"];
const RANK_KEYS: &[&str] = &["deltas", "max_r"];
const SECTIONS: &[&str] = &["env", "me", "schedule", "anchors", "proxy", "run", "rollout", "rank"];

/// Scalar environment parameters accepted under `[env]`.
pub const ENV_PARAM_KEYS: &[&str] = &[
    "gamma", "tau", "noise_mu", "noise_sigma", "lipschitz", "cart_mass", "pole_mass", "pole_half_length", "gravity",
    "link_length_1", "link_length_2", "link_com_1", "link_com_2", "link_mass_1", "link_mass_2",
];

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    errors: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn err(&mut self, key: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{}.{key}: {msg}", self.name));
    }

    fn f64_opt(&mut self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            other => {
                self.err(key, format!("expected a number, found {}", other.type_str()));
                None
            }
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> f64 {
        self.f64_opt(key).unwrap_or(default)
    }

    fn usize_opt(&mut self, key: &str) -> Option<usize> {
        match self.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            other => {
                self.err(key, format!("expected a nonnegative integer, found {other}"));
                None
            }
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> usize {
        self.usize_opt(key).unwrap_or(default)
    }

    fn u64_opt(&mut self, key: &str) -> Option<u64> {
        self.usize_opt(key).map(|v| v as u64)
    }

    fn bool_or(&mut self, key: &str, default: bool) -> bool {
        match self.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(other) => {
                self.err(key, format!("expected a boolean, found {}", other.type_str()));
                default
            }
        }
    }

    fn str_opt(&mut self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.err(key, format!("expected a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        let arr = match self.get(key)? {
            Value::Array(a) => a,
            other => {
                self.err(key, format!("expected an array of numbers, found {}", other.type_str()));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for v in arr {
            match v {
                Value::Float(x) => out.push(*x),
                Value::Integer(i) => out.push(*i as f64),
                other => {
                    self.err(key, format!("array entries must be numbers, found {}", other.type_str()));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn usize_list(&mut self, key: &str) -> Option<Vec<usize>> {
        let arr = match self.get(key)? {
            Value::Array(a) => a,
            other => {
                self.err(key, format!("expected an array of integers, found {}", other.type_str()));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for v in arr {
            match v {
                Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                other => {
                    self.err(key, format!("array entries must be nonnegative integers, found {other}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn str_list(&mut self, key: &str) -> Option<Vec<String>> {
        let arr = match self.get(key)? {
            Value::Array(a) => a,
            other => {
                self.err(key, format!("expected an array of strings, found {}", other.type_str()));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for v in arr {
            match v {
                Value::String(s) => out.push(s.clone()),
                other => {
                    self.err(key, format!("array entries must be strings, found {}", other.type_str()));
                    return None;
                }
            }
        }
        Some(out)
    }
}

fn section<'a>(root: &'a Table, name: &'static str, errors: &mut Vec<String>) -> Option<&'a Table> {
    match root.get(name) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(other) => {
            errors.push(format!("{name}: expected a table, found {}", other.type_str()));
            None
        }
    }
}

fn unknown_keys(root: &Table, errors: &mut Vec<String>) {
    for (key, value) in root {
        if !SECTIONS.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown section"));
            continue;
        }
        let Value::Table(t) = value else { continue };
        let allowed: &[&str] = match key.as_str() {
            "env" => ENV_KEYS,
            "me" => ME_KEYS,
            "schedule" => SCHEDULE_KEYS,
            "anchors" => ANCHOR_KEYS,
            "proxy" => PROXY_KEYS,
            "run" => RUN_KEYS,
            "rollout" => ROLLOUT_KEYS,
            _ => RANK_KEYS,
        };
        for k in t.keys() {
            let env_param = key == "env" && ENV_PARAM_KEYS.contains(&k.as_str());
            if !allowed.contains(&k.as_str()) && !env_param {
                errors.push(format!("{key}.{k}: unknown key"));
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigErrors> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigErrors(vec![format!("TOML syntax: {e}")]))?;
        let mut errors = Vec::new();
        unknown_keys(&root, &mut errors);

        let env = parse_env(&root, &mut errors);
        let anchors = parse_anchors(&root, &mut errors);
        let me = parse_me(&root, &mut errors);
        let schedule = parse_schedule(&root, &mut errors);
        let proxy = parse_proxy(&root, &mut errors);
        let run = parse_run(&root, &mut errors);
        let rollout = parse_rollout(&root, &mut errors);
        let rank = parse_rank(&root, &mut errors);
        let hash = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        let cfg = Self { env, me, schedule, anchors, proxy, run, rollout, rank, hash };
        let clean = errors.is_empty();
        cfg.cross_check(&mut errors, clean);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// Checks that need the environment. Dimension checks only run on an
    /// otherwise clean config, where they cannot echo earlier errors.
    fn cross_check(&self, errors: &mut Vec<String>, dims: bool) {
        if self.env.name.is_empty() {
            return;
        }
        let env = match self.build_env() {
            Ok(e) => e,
            Err(e) => {
                errors.push(e);
                return;
            }
        };
        if !dims {
            return;
        }
        let (ds, da) = (env.state_space.dims(), env.action_space.dims());
        if self.schedule.kind == ScheduleKind::Finite && !env.is_finite() {
            errors.push("schedule.mode: `finite` requires env.finite_kind".into());
        }
        if env.is_finite() && self.schedule.kind != ScheduleKind::Finite {
            errors.push("schedule.mode: finite MDPs require mode = \"finite\"".into());
        }
        if !env.is_finite() {
            if self.schedule.table.max_state_counts.len() != ds {
                errors.push(format!("schedule.max_state_counts: expected {ds} entries"));
            }
            if self.schedule.table.max_action_counts.len() != da {
                errors.push(format!("schedule.max_action_counts: expected {da} entries"));
            }
            if self.proxy.vi.s_counts.len() != ds {
                errors.push(format!("proxy.state_counts: expected {ds} entries"));
            }
            if self.proxy.vi.a_counts.len() != da {
                errors.push(format!("proxy.action_counts: expected {da} entries"));
            }
        }
        for (name, v) in [("init_low", &self.rollout.init_low), ("init_high", &self.rollout.init_high)] {
            if let Some(v) = v {
                if v.len() != ds {
                    errors.push(format!("rollout.{name}: expected {ds} entries"));
                }
            }
        }
        if self.schedule.kind == ScheduleKind::Theory
            && self.schedule.c_me.is_none()
            && !matches!(self.me.method, MeMethod::Rank1)
        {
            errors.push("schedule.c_me: required by the theory schedule unless me.method = \"rank1\"".into());
        }
    }

    /// Instantiates the configured environment.
    pub fn build_env(&self) -> Result<MdpSpec, String> {
        let e = &self.env;
        let mut spec = match &e.finite_kind {
            Some(kind) => {
                let g = e.finite.gamma;
                if !(0.0..1.0).contains(&g) {
                    return Err(format!("env.gamma: must lie in [0,1), got {g}"));
                }
                let mdp = make_finite_mdp(kind, &e.finite).map_err(|err| format!("env: {err}"))?;
                MdpSpec::from_finite(&e.name, mdp).map_err(|err| format!("env: {err}"))?
            }
            None => make_env(&e.name).map_err(|err| format!("env.name: {err}"))?,
        };
        let mut errors = Vec::new();
        for (k, v) in &e.params {
            if spec.is_finite() && k != "gamma" {
                errors.push(format!("env.{k}: finite MDPs only accept gamma"));
                continue;
            }
            if let Err(err) = spec.set_param(k, *v) {
                errors.push(format!("env.{k}: {err}"));
            }
        }
        if let Some((lo, hi)) = &e.state_bounds {
            if let Err(err) = spec.set_state_bounds(lo.clone(), hi.clone()) {
                errors.push(format!("env.state_lower/state_upper: {err}"));
            }
        }
        if let Some((lo, hi)) = &e.action_bounds {
            if let Err(err) = spec.set_action_bounds(lo.clone(), hi.clone()) {
                errors.push(format!("env.action_lower/action_upper: {err}"));
            }
        }
        if errors.is_empty() {
            Ok(spec)
        } else {
            Err(errors.join("; "))
        }
    }
}

fn parse_env(root: &Table, errors: &mut Vec<String>) -> EnvConfig {
    let table = section(root, "env", errors);
    let mut s = Section { name: "env", table, errors };
    let name = s.str_opt("name").unwrap_or_default();
    if name.is_empty() {
        s.errors.push("env.name: required".into());
    }
    let mut params = Vec::new();
    if let Some(t) = table {
        for (k, _) in t.iter().filter(|(k, _)| ENV_PARAM_KEYS.contains(&k.as_str())) {
            if let Some(v) = s.f64_opt(k) {
                params.push((k.clone(), v));
            }
        }
    }
    let pair = |s: &mut Section, lo: &str, hi: &str| match (s.f64_list(lo), s.f64_list(hi)) {
        (Some(l), Some(h)) => Some((l, h)),
        (None, None) => None,
        _ => {
            s.err(lo, format!("`{lo}` and `{hi}` must be given together"));
            None
        }
    };
    let state_bounds = pair(&mut s, "state_lower", "state_upper");
    let action_bounds = pair(&mut s, "action_lower", "action_upper");
    let finite_kind = s.str_opt("finite_kind");
    let defaults = FiniteMdpParams::default();
    let gamma = params.iter().find(|(k, _)| k == "gamma").map_or(defaults.gamma, |p| p.1);
    let finite = FiniteMdpParams {
        n_states: s.usize_or("n_states", defaults.n_states),
        n_actions: s.usize_or("n_actions", defaults.n_actions),
        gamma,
        rewards: s.f64_list("rewards"),
        seed: s.u64_opt("finite_seed").unwrap_or(defaults.seed),
    };
    if finite_kind.is_none() {
        for key in ["n_states", "n_actions", "rewards", "finite_seed"] {
            if s.get(key).is_some() {
                s.err(key, "only valid together with env.finite_kind");
            }
        }
    }
    EnvConfig { name, params, state_bounds, action_bounds, finite_kind, finite }
}

fn parse_anchors(root: &Table, errors: &mut Vec<String>) -> AnchorConfig {
    let table = section(root, "anchors", errors);
    let mut s = Section { name: "anchors", table, errors };
    let r = s.usize_or("r", 10);
    if r == 0 {
        s.err("r", "must be at least 1");
    }
    let jitter = s.f64_or("jitter", 1.0);
    if !(0.0..=1.0).contains(&jitter) {
        s.err("jitter", "must lie in [0, 1]");
    }
    AnchorConfig { r, jitter, seed: s.u64_opt("seed") }
}

const METHODS: &[&str] = &["rank1", "rank2", "rankr", "usvt", "soft_impute", "none"];

fn parse_me(root: &Table, errors: &mut Vec<String>) -> MeConfig {
    let table = section(root, "me", errors);
    let mut s = Section { name: "me", table, errors };
    let defaults = AnchorOptions::default();
    let rank_tol = s.f64_or("rank_tol", 1e-3);
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        s.err("rank_tol", "must lie in (0, 1)");
    }
    let rank = s.usize_opt("rank");
    if rank == Some(0) {
        s.err("rank", "must be at least 1");
    }
    let anchor = AnchorOptions { rank_tol, rank, min_sigma_r: s.f64_or("min_sigma_r", defaults.min_sigma_r) };
    let threshold_mult = s.f64_or("threshold_mult", 1.0);
    if !(threshold_mult > 0.0) {
        s.err("threshold_mult", "must be positive");
    }
    let lambda = s.f64_or("lambda", 1.0);
    if !(lambda >= 0.0) {
        s.err("lambda", "must be nonnegative");
    }
    let max_iters = s.usize_or("max_iters", 200);
    if max_iters == 0 {
        s.err("max_iters", "must be at least 1");
    }
    let tol = s.f64_or("tol", 1e-5);
    if !(tol > 0.0) {
        s.err("tol", "must be positive");
    }
    let name = s.str_opt("method").unwrap_or_else(|| "rankr".into());
    let method = method_from(&name, anchor, threshold_mult, lambda, max_iters, tol).unwrap_or_else(|| {
        s.err("method", format!("unknown method `{name}` (expected one of {})", METHODS.join(", ")));
        MeMethod::None
    });
    let bench_methods = s.str_list("bench_methods").unwrap_or_else(|| vec!["rankr".into(), "usvt".into(), "soft_impute".into()]);
    for m in &bench_methods {
        if !METHODS.contains(&m.as_str()) || m == "none" {
            s.err("bench_methods", format!("`{m}` is not a matrix estimator"));
        }
    }
    if bench_methods.is_empty() {
        s.err("bench_methods", "must not be empty");
    }
    let usvt_thresholds = s.f64_list("usvt_thresholds").unwrap_or_else(|| vec![threshold_mult]);
    let soft_impute_lambdas = s.f64_list("soft_impute_lambdas").unwrap_or_else(|| vec![lambda]);
    if usvt_thresholds.is_empty() || usvt_thresholds.iter().any(|&x| !(x > 0.0)) {
        s.err("usvt_thresholds", "must be a nonempty list of positive numbers");
    }
    if soft_impute_lambdas.is_empty() || soft_impute_lambdas.iter().any(|&x| !(x >= 0.0)) {
        s.err("soft_impute_lambdas", "must be a nonempty list of nonnegative numbers");
    }
    MeConfig {
        method,
        bench_methods,
        usvt_thresholds,
        soft_impute_lambdas,
        soft_impute_max_iters: max_iters,
        soft_impute_tol: tol,
        anchor,
    }
}

/// Builds an estimator from its name and hyperparameters.
pub fn method_from(
    name: &str,
    anchor: AnchorOptions,
    threshold_mult: f64,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Option<MeMethod> {
    Some(match name {
        "rank1" => MeMethod::Rank1,
        "rank2" => MeMethod::Rank2,
        "rankr" => MeMethod::RankR(anchor),
        "usvt" => MeMethod::Usvt { threshold_mult },
        "soft_impute" => MeMethod::SoftImpute { lambda, max_iters, tol },
        "none" => MeMethod::None,
        _ => return None,
    })
}

fn parse_schedule(root: &Table, errors: &mut Vec<String>) -> ScheduleConfig {
    let table = section(root, "schedule", errors);
    let mut s = Section { name: "schedule", table, errors };
    let kind = match s.str_opt("mode").as_deref() {
        None | Some("table") => ScheduleKind::Table,
        Some("theory") => ScheduleKind::Theory,
        Some("finite") => ScheduleKind::Finite,
        Some(other) => {
            s.err("mode", format!("unknown mode `{other}` (expected table, theory, finite)"));
            ScheduleKind::Table
        }
    };
    let t_max = s.usize_or("t_max", 15);
    if t_max == 0 {
        s.err("t_max", "must be at least 1");
    }
    let n_samples = s.usize_or("n_samples", 32);
    if n_samples == 0 {
        s.err("n_samples", "must be at least 1");
    }
    let beta1 = s.f64_opt("beta1");
    if beta1.is_some_and(|b| !(b > 0.0)) {
        s.err("beta1", "must be positive");
    }
    let max_state_counts = s.usize_list("max_state_counts").unwrap_or_default();
    let max_action_counts = s.usize_list("max_action_counts").unwrap_or_default();
    if max_state_counts.iter().chain(&max_action_counts).any(|&c| c == 0) {
        s.err("max_state_counts", "grid caps must be positive");
    }
    let beta_table = s.f64_list("beta_table");
    let n_table = s.usize_list("n_table");
    for (key, len) in [("beta_table", beta_table.as_ref().map(Vec::len)), ("n_table", n_table.as_ref().map(Vec::len))] {
        if let Some(len) = len {
            if len != t_max {
                s.err(key, format!("has {len} entries, expected t_max = {t_max}"));
            }
        }
    }
    let delta = s.f64_or("delta", 0.05);
    if !(delta > 0.0 && delta < 1.0) {
        s.err("delta", "must lie in (0, 1)");
    }
    let c_me = s.f64_opt("c_me");
    let big_c_me = s.f64_opt("big_c_me");
    for (key, v) in [("c_me", c_me), ("big_c_me", big_c_me)] {
        if v.is_some_and(|x| !(x > 0.0)) {
            s.err(key, "must be positive");
        }
    }
    ScheduleConfig {
        kind,
        t_max,
        table: TableSpec { beta1, max_state_counts, max_action_counts, n_samples, beta_table, n_table },
        delta,
        c_me,
        big_c_me,
    }
}

fn parse_proxy(root: &Table, errors: &mut Vec<String>) -> ProxyConfig {
    let table = section(root, "proxy", errors);
    let mut s = Section { name: "proxy", table, errors };
    let s_counts = s.usize_list("state_counts").unwrap_or_default();
    let a_counts = s.usize_list("action_counts").unwrap_or_default();
    if s_counts.iter().chain(&a_counts).any(|&c| c == 0) {
        s.err("state_counts", "grid counts must be positive");
    }
    let noise_draws = s.usize_or("noise_draws", 5);
    if noise_draws == 0 {
        s.err("noise_draws", "must be at least 1");
    }
    let tol = s.f64_or("tol", 1e-4);
    if !(tol > 0.0) {
        s.err("tol", "must be positive");
    }
    let max_sweeps = s.usize_or("max_sweeps", 1000);
    if max_sweeps == 0 {
        s.err("max_sweeps", "must be at least 1");
    }
    ProxyConfig { vi: ViSettings { s_counts, a_counts, noise_draws, tol, max_sweeps }, analytic: s.bool_or("analytic", false) }
}

fn parse_run(root: &Table, errors: &mut Vec<String>) -> RunConfig {
    let table = section(root, "run", errors);
    let mut s = Section { name: "run", table, errors };
    let n_seeds = s.usize_or("seeds", 1);
    if n_seeds == 0 {
        s.err("seeds", "must be at least 1");
    }
    RunConfig {
        seed: s.u64_opt("seed").unwrap_or(0),
        n_seeds,
        out: PathBuf::from(s.str_opt("out").unwrap_or_else(|| "out".into())),
        clip: s.bool_or("clip", true),
    }
}

fn parse_rollout(root: &Table, errors: &mut Vec<String>) -> RolloutConfig {
    let table = section(root, "rollout", errors);
    let mut s = Section { name: "rollout", table, errors };
    let episodes = s.usize_or("episodes", 20);
    if episodes == 0 {
        s.err("episodes", "must be at least 1");
    }
    let horizon = s.usize_or("horizon", 500);
    if horizon == 0 {
        s.err("horizon", "must be at least 1");
    }
    let source = match s.str_opt("source").as_deref() {
        None | Some("both") => QSource::Both,
        Some("learned") => QSource::Learned,
        Some("proxy") => QSource::Proxy,
        Some(other) => {
            s.err("source", format!("unknown source `{other}` (expected learned, proxy, both)"));
            QSource::Both
        }
    };
    let init_low = s.f64_list("init_low");
    let init_high = s.f64_list("init_high");
    if init_low.is_some() != init_high.is_some() {
        s.err("init_low", "`init_low` and `init_high` must be given together");
    }
    if let (Some(lo), Some(hi)) = (&init_low, &init_high) {
        if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
            s.err("init_low", "must not exceed init_high");
        }
    }
    RolloutConfig { episodes, horizon, source, init_low, init_high }
}

fn parse_rank(root: &Table, errors: &mut Vec<String>) -> RankConfig {
    let table = section(root, "rank", errors);
    let mut s = Section { name: "rank", table, errors };
    let deltas = s.f64_list("deltas").unwrap_or_else(|| vec![1e-9, 1e-6, 1e-3, 1e-1]);
    if deltas.iter().any(|&d| !(d >= 0.0)) {
        s.err("deltas", "must be nonnegative");
    }
    let max_r = s.usize_or("max_r", 20);
    if max_r == 0 {
        s.err("max_r", "must be at least 1");
    }
    RankConfig { deltas, max_r }
}
