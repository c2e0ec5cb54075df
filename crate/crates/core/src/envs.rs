//! Generative-model simulators: five stochastic control tasks, a synthetic
//! task with an exactly rank-1 `Q*`, and finite tabular MDPs.
//!
//! Every continuous task is an explicit Euler discretization with Gaussian
//! noise injected into exactly one state coordinate. After each step the
//! state is projected back into its box: angle coordinates wrap into
//! `[lower, upper)`, all others are clipped.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Names accepted by [`make_env`].
pub const TASK_NAMES: [&str; 6] = [
    "inverted_pendulum",
    "mountain_car",
    "double_integrator",
    "cart_pole",
    "acrobot",
    "synthetic_rank1",
];

/// Compact axis-aligned box `Π [lower_k, upper_k]`. Coordinates flagged
/// periodic wrap instead of clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
    periodic: Vec<bool>,
}

impl BoxSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let periodic = vec![false; lower.len()];
        Self::with_periodic(lower, upper, periodic)
    }

    pub fn with_periodic(lower: Vec<f64>, upper: Vec<f64>, periodic: Vec<bool>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidInput("a box needs at least one dimension".into()));
        }
        if lower.len() != upper.len() || lower.len() != periodic.len() {
            return Err(Error::InvalidInput("box bounds have mismatched lengths".into()));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidInput(format!("dimension {k}: need lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper, periodic })
    }

    /// The unit cube `[0,1]^d`.
    pub fn unit(dims: usize) -> Result<Self> {
        Self::new(vec![0.0; dims], vec![1.0; dims])
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn range(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Diameter in normalized coordinates, where every side has length 1.
    pub fn diameter(&self) -> f64 {
        (self.dims() as f64).sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x.iter().enumerate().all(|(k, &v)| {
                if self.periodic[k] {
                    v >= self.lower[k] && v < self.upper[k]
                } else {
                    v >= self.lower[k] && v <= self.upper[k]
                }
            })
    }

    /// Maps `x` into the box in place.
    pub fn project(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if self.periodic[k] {
                let range = hi - lo;
                let mut w = *v - range * ((*v - lo) / range).floor();
                if w >= hi || w < lo {
                    w = lo;
                }
                *v = w;
            } else {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Coordinate `k` of `x` rescaled so the box side is 1.
    #[inline]
    pub fn normalize(&self, k: usize, v: f64) -> f64 {
        (v - self.lower[k]) / (self.upper[k] - self.lower[k])
    }

    /// Squared ℓ2 distance in normalized coordinates.
    #[inline]
    pub fn dist2(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..x.len() {
            let d = (x[k] - y[k]) / (self.upper[k] - self.lower[k]);
            acc += d * d;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub gravity: f64,
    /// Distance from pivot to the pole's centre of mass.
    pub pole_half_length: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self { cart_mass: 1.0, pole_mass: 0.1, gravity: 9.8, pole_half_length: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcrobotParams {
    pub link_length_1: f64,
    pub link_length_2: f64,
    pub link_com_1: f64,
    pub link_com_2: f64,
    pub link_mass_1: f64,
    pub link_mass_2: f64,
    pub gravity: f64,
}

impl Default for AcrobotParams {
    fn default() -> Self {
        Self {
            link_length_1: 1.0,
            link_length_2: 1.0,
            link_com_1: 0.5,
            link_com_2: 0.5,
            link_mass_1: 1.0,
            link_mass_2: 1.0,
            gravity: 9.8,
        }
    }
}

/// Finite MDP with dense transition tensor `P(s' | s, a)` stored at
/// `(s·|A| + a)·|S| + s'`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: DenseMatrix,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn new(n_states: usize, n_actions: usize, transition: Vec<f64>, reward: DenseMatrix, gamma: f64) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config("finite MDP needs at least one state and one action".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Config("transition tensor has the wrong size".into()));
        }
        if reward.shape() != (n_states, n_actions) || !reward.is_finite() {
            return Err(Error::Config("reward matrix must be finite with shape |S|x|A|".into()));
        }
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in [0,1), got {gamma}")));
        }
        for sa in 0..n_states * n_actions {
            let row = &transition[sa * n_states..(sa + 1) * n_states];
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("transition row {sa} is not a probability vector")));
            }
        }
        Ok(Self { n_states, n_actions, transition, reward, gamma })
    }

    #[inline]
    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        let start = (s * self.n_actions + a) * n;
        &self.transition[start..start + n]
    }

    /// Inverse-CDF draw of the next state from a uniform `u ∈ [0,1)`.
    pub fn sample_next(&self, s: usize, a: usize, u: f64) -> usize {
        let row = self.next_distribution(s, a);
        let mut acc = 0.0;
        for (k, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding slack; take the last state with mass.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(self.n_states - 1)
    }
}

/// Parameters for [`make_finite_mdp`].
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdpParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Per-state rewards (single_state, chain). Defaults: 1 for the single
    /// state; 0 everywhere but 1 on the last chain state.
    pub rewards: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for FiniteMdpParams {
    fn default() -> Self {
        Self { n_states: 1, n_actions: 1, gamma: 0.5, rewards: None, seed: 0 }
    }
}

/// Builds a small tabular MDP: `single_state`, a deterministic `chain`
/// (`s → s+1`, last state absorbing), or `random_stochastic`.
pub fn make_finite_mdp(kind: &str, params: &FiniteMdpParams) -> Result<FiniteMdp> {
    let (n, m) = (params.n_states, params.n_actions);
    if n == 0 || m == 0 {
        return Err(Error::Config("finite MDP needs at least one state and one action".into()));
    }
    let per_state = |default: Vec<f64>| -> Result<Vec<f64>> {
        let r = params.rewards.clone().unwrap_or(default);
        if r.len() != n {
            return Err(Error::Config(format!("expected {n} rewards, got {}", r.len())));
        }
        Ok(r)
    };
    match kind {
        "single_state" => {
            if n != 1 {
                return Err(Error::Config("single_state requires n_states = 1".into()));
            }
            let r = per_state(vec![1.0])?;
            FiniteMdp::new(1, m, vec![1.0; m], DenseMatrix::filled(1, m, r[0]), params.gamma)
        }
        "chain" => {
            let mut default = vec![0.0; n];
            default[n - 1] = 1.0;
            let r = per_state(default)?;
            let mut p = vec![0.0; n * m * n];
            for s in 0..n {
                let next = (s + 1).min(n - 1);
                for a in 0..m {
                    p[(s * m + a) * n + next] = 1.0;
                }
            }
            FiniteMdp::new(n, m, p, DenseMatrix::from_fn(n, m, |s, _| r[s]), params.gamma)
        }
        "random_stochastic" => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut p = vec![0.0; n * m * n];
            for row in p.chunks_mut(n) {
                for v in row.iter_mut() {
                    *v = rng.random::<f64>() + 1e-3;
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            let reward = DenseMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
            FiniteMdp::new(n, m, p, reward, params.gamma)
        }
        other => Err(Error::Config(format!(
            "unknown finite MDP kind `{other}` (expected single_state, chain, random_stochastic)"
        ))),
    }
}

/// The dynamics behind an [`MdpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    InvertedPendulum,
    MountainCar,
    DoubleIntegrator,
    CartPole(CartPoleParams),
    Acrobot(AcrobotParams),
    /// `Q*(s,a) = (1+s)(1+a)` on `[0,1]²`; next state `clip(½ + noise)`
    /// independent of `(s,a)`, reward `(1+s)(1+a) − 3γ`.
    SyntheticRank1,
    /// Tabular MDP embedded on integer lattice points.
    Finite(Arc<FiniteMdp>),
}

/// Generative model specification: spaces, dynamics, reward and constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub name: String,
    pub dynamics: Dynamics,
    pub state_space: BoxSpace,
    pub action_space: BoxSpace,
    pub gamma: f64,
    /// Assumed Lipschitz constant of `Q*` in normalized coordinates.
    pub lipschitz_l: f64,
    pub tau: f64,
    pub noise_mu: f64,
    pub noise_sigma: f64,
}

/// Mountain-car goal position.
pub const MOUNTAIN_CAR_GOAL: f64 = 0.5;

pub fn make_env(name: &str) -> Result<MdpSpec> {
    let b = |lo: Vec<f64>, hi: Vec<f64>| BoxSpace::new(lo, hi);
    let spec = match name {
        "inverted_pendulum" => MdpSpec {
            name: name.into(),
            dynamics: Dynamics::InvertedPendulum,
            state_space: BoxSpace::with_periodic(vec![-PI, -2.0], vec![PI, 2.0], vec![true, false])?,
            action_space: b(vec![-1.0], vec![1.0])?,
            gamma: 0.9,
            lipschitz_l: 1.0,
            tau: 0.3,
            noise_mu: 0.0,
            noise_sigma: 0.1,
        },
        "mountain_car" => MdpSpec {
            name: name.into(),
            dynamics: Dynamics::MountainCar,
            state_space: b(vec![-1.2, -0.07], vec![0.6, 0.07])?,
            action_space: b(vec![-1.0], vec![1.0])?,
            gamma: 0.9,
            lipschitz_l: 1.0,
            tau: 1.0,
            noise_mu: 0.0,
            noise_sigma: 1e-3,
        },
        "double_integrator" => MdpSpec {
            name: name.into(),
            dynamics: Dynamics::DoubleIntegrator,
            state_space: b(vec![-3.0, -3.0], vec![3.0, 3.0])?,
            action_space: b(vec![-1.0], vec![1.0])?,
            gamma: 0.9,
            lipschitz_l: 1.0,
            tau: 0.1,
            noise_mu: 0.0,
            noise_sigma: 0.1,
        },
        "cart_pole" => MdpSpec {
            name: name.into(),
            dynamics: Dynamics::CartPole(CartPoleParams::default()),
            state_space: b(vec![-PI / 2.0, -3.0, -2.4, -3.0], vec![PI / 2.0, 3.0, 2.4, 3.0])?,
            action_space: b(vec![-10.0], vec![10.0])?,
            gamma: 0.9,
            lipschitz_l: 1.0,
            tau: 0.1,
            noise_mu: 0.0,
            noise_sigma: 0.1,
        },
        "acrobot" => MdpSpec {
            name: name.into(),
            dynamics: Dynamics::Acrobot(AcrobotParams::default()),
            state_space: BoxSpace::with_periodic(
                vec![-PI, -4.0 * PI, -PI, -9.0 * PI],
                vec![PI, 4.0 * PI, PI, 9.0 * PI],
                vec![true, false, true, false],
            )?,
            action_space: b(vec![-10.0], vec![10.0])?,
            gamma: 0.9,
            lipschitz_l: 1.0,
            tau: 0.1,
            noise_mu: 0.0,
            noise_sigma: 0.1,
        },
        "synthetic_rank1" => MdpSpec {
            name: name.into(),
            dynamics: Dynamics::SyntheticRank1,
            state_space: BoxSpace::unit(1)?,
            action_space: BoxSpace::unit(1)?,
            gamma: 0.01,
            lipschitz_l: 2.0,
            tau: 1.0,
            noise_mu: 0.0,
            noise_sigma: 0.1,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown environment `{other}` (expected one of {})",
                TASK_NAMES.join(", ")
            )))
        }
    };
    Ok(spec)
}

impl MdpSpec {
    /// Wraps a tabular MDP; states and actions become the integer points of
    /// `[-½, n-½]` so 1-NN on the full lattice is the identity.
    pub fn from_finite(name: &str, mdp: FiniteMdp) -> Result<Self> {
        let n = mdp.n_states as f64;
        let m = mdp.n_actions as f64;
        Ok(Self {
            name: name.into(),
            gamma: mdp.gamma,
            state_space: BoxSpace::new(vec![-0.5], vec![n - 0.5])?,
            action_space: BoxSpace::new(vec![-0.5], vec![m - 0.5])?,
            dynamics: Dynamics::Finite(Arc::new(mdp)),
            lipschitz_l: 1.0,
            tau: 1.0,
            noise_mu: 0.0,
            noise_sigma: 0.0,
        })
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.dynamics, Dynamics::Finite(_))
    }

    /// `(R_min, R_max)` over the declared spaces.
    pub fn reward_bounds(&self) -> (f64, f64) {
        match &self.dynamics {
            Dynamics::InvertedPendulum => {
                let u = self.action_space.lower()[0].abs().max(self.action_space.upper()[0].abs());
                (-0.1 * u * u + (-2.0f64).exp(), 1.0)
            }
            Dynamics::MountainCar => (-1.0, 10.0),
            Dynamics::DoubleIntegrator => {
                let s = &self.state_space;
                let x = s.lower()[0].abs().max(s.upper()[0].abs());
                let v = s.lower()[1].abs().max(s.upper()[1].abs());
                (-0.5 * (x * x + v * v), 0.0)
            }
            Dynamics::CartPole(_) => (0.0, 1.0),
            Dynamics::Acrobot(_) => (2.0 * (-2.0f64).exp(), 2.0),
            Dynamics::SyntheticRank1 => (1.0 - 3.0 * self.gamma, 4.0 - 3.0 * self.gamma),
            Dynamics::Finite(mdp) => {
                let r = mdp.reward.as_slice();
                let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    pub fn r_max(&self) -> f64 {
        self.reward_bounds().1
    }

    pub fn r_min(&self) -> f64 {
        self.reward_bounds().0
    }

    /// `V_max = R_max / (1 − γ)`.
    pub fn v_max(&self) -> f64 {
        self.r_max() / (1.0 - self.gamma)
    }

    /// Bound on `|Q*|`: `max(|R_min|, |R_max|) / (1 − γ)`.
    pub fn value_bound(&self) -> f64 {
        let (lo, hi) = self.reward_bounds();
        lo.abs().max(hi.abs()) / (1.0 - self.gamma)
    }

    /// Closed-form `Q*` when the task has one.
    pub fn analytic_q_star(&self, s: &[f64], a: &[f64]) -> Option<f64> {
        match self.dynamics {
            Dynamics::SyntheticRank1 if self.noise_mu == 0.0 => Some((1.0 + s[0]) * (1.0 + a[0])),
            _ => None,
        }
    }

    /// Overrides a scalar parameter by configuration key.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Config(format!("env.{key} must be finite")));
        }
        let positive = |v: f64| -> Result<f64> {
            if v > 0.0 {
                Ok(v)
            } else {
                Err(Error::Config(format!("env.{key} must be positive, got {v}")))
            }
        };
        match (key, &mut self.dynamics) {
            ("gamma", _) => {
                if !(value >= 0.0 && value < 1.0) {
                    return Err(Error::Config(format!("env.gamma must lie in [0,1), got {value}")));
                }
                self.gamma = value;
            }
            ("tau", _) => self.tau = positive(value)?,
            ("noise_mu", _) => self.noise_mu = value,
            ("noise_sigma", _) => {
                if value < 0.0 {
                    return Err(Error::Config("env.noise_sigma must be nonnegative".into()));
                }
                self.noise_sigma = value;
            }
            ("lipschitz", _) => self.lipschitz_l = positive(value)?,
            ("cart_mass", Dynamics::CartPole(p)) => p.cart_mass = positive(value)?,
            ("pole_mass", Dynamics::CartPole(p)) => p.pole_mass = positive(value)?,
            ("pole_half_length", Dynamics::CartPole(p)) => p.pole_half_length = positive(value)?,
            ("gravity", Dynamics::CartPole(p)) => p.gravity = value,
            ("link_length_1", Dynamics::Acrobot(p)) => p.link_length_1 = positive(value)?,
            ("link_length_2", Dynamics::Acrobot(p)) => p.link_length_2 = positive(value)?,
            ("link_com_1", Dynamics::Acrobot(p)) => p.link_com_1 = positive(value)?,
            ("link_com_2", Dynamics::Acrobot(p)) => p.link_com_2 = positive(value)?,
            ("link_mass_1", Dynamics::Acrobot(p)) => p.link_mass_1 = positive(value)?,
            ("link_mass_2", Dynamics::Acrobot(p)) => p.link_mass_2 = positive(value)?,
            ("gravity", Dynamics::Acrobot(p)) => p.gravity = value,
            _ => return Err(Error::Config(format!("env `{}` has no parameter `{key}`", self.name))),
        }
        Ok(())
    }

    /// Replaces the state box, keeping periodic flags.
    pub fn set_state_bounds(&mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<()> {
        self.state_space = self.rebound(&self.state_space, lower, upper)?;
        Ok(())
    }

    pub fn set_action_bounds(&mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<()> {
        self.action_space = self.rebound(&self.action_space, lower, upper)?;
        Ok(())
    }

    fn rebound(&self, old: &BoxSpace, lower: Vec<f64>, upper: Vec<f64>) -> Result<BoxSpace> {
        if self.is_finite() {
            return Err(Error::Config("finite MDP spaces cannot be rebounded".into()));
        }
        if lower.len() != old.dims() || upper.len() != old.dims() {
            return Err(Error::Config(format!("expected {} bounds per side", old.dims())));
        }
        BoxSpace::with_periodic(lower, upper, old.periodic().to_vec()).map_err(|e| Error::Config(e.to_string()))
    }

    /// One explicit Euler step with the given noise draw, written into `out`.
    /// No validation; see [`MdpSpec::step`].
    #[inline]
    pub fn step_into(&self, s: &[f64], a: &[f64], noise: f64, out: &mut [f64]) {
        let tau = self.tau;
        let u = a[0];
        match &self.dynamics {
            Dynamics::InvertedPendulum => {
                let (th, thd) = (s[0], s[1]);
                out[0] = th + thd * tau;
                out[1] = thd + (th.sin() - thd + u) * tau + noise;
            }
            Dynamics::MountainCar => {
                let (x, xd) = (s[0], s[1]);
                out[0] = x + xd + noise;
                out[1] = xd - 0.0025 * (3.0 * x).cos() + 0.001 * u;
            }
            Dynamics::DoubleIntegrator => {
                let (x, xd) = (s[0], s[1]);
                out[0] = x + xd * tau + noise;
                out[1] = xd + u * tau;
            }
            Dynamics::CartPole(p) => {
                let (th, thd, x, xd) = (s[0], s[1], s[2], s[3]);
                let total = p.cart_mass + p.pole_mass;
                let (sin, cos) = th.sin_cos();
                let ml = p.pole_mass * p.pole_half_length;
                let thdd = (p.gravity * sin - cos * (u + ml * thd * thd * sin) / total)
                    / (p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
                let xdd = (u + ml * (thd * thd * sin - thdd * cos)) / total;
                out[0] = th + thd * tau;
                out[1] = thd + thdd * tau + noise;
                out[2] = x + xd * tau;
                out[3] = xd + xdd * tau;
            }
            Dynamics::Acrobot(p) => {
                let (th1, thd1, th2, thd2) = (s[0], s[1], s[2], s[3]);
                let (l1, l2, lc1, lc2) = (p.link_length_1, p.link_length_2, p.link_com_1, p.link_com_2);
                let (m1, m2, g) = (p.link_mass_1, p.link_mass_2, p.gravity);
                let cos2 = th2.cos();
                let sin2 = th2.sin();
                let d1 = m1 * (l1 * l1 + lc1 * lc1) + m2 * (l1 * l1 + l2 * l2 + lc2 * lc2 + 2.0 * l1 * lc2 * cos2);
                let d2 = m2 * (l2 * l2 + lc2 * lc2 + l1 * lc2 * cos2);
                let phi2 = m2 * lc2 * g * (th1 + th2).sin();
                let phi1 = -m2 * l1 * lc2 * thd2 * (thd2 + 2.0 * thd1) * sin2 + (m1 * lc1 + m2 * l1) * g * th1.sin() + phi2;
                let thdd2 = (u + d2 / d1 * phi1 - m2 * l1 * lc2 * thd1 * thd1 * sin2 - phi2)
                    / (m2 * (l2 * l2 + lc2 * lc2) - d2 * d2 / d1);
                let thdd1 = -(d2 * thdd2 + phi1) / d1;
                out[0] = th1 + thd1 * tau;
                out[1] = thd1 + thdd1 * tau + noise;
                out[2] = th2 + thd2 * tau;
                out[3] = thd2 + thdd2 * tau;
            }
            Dynamics::SyntheticRank1 => {
                out[0] = 0.5 + noise;
            }
            Dynamics::Finite(mdp) => {
                let (si, ai) = (finite_index(s[0], mdp.n_states), finite_index(u, mdp.n_actions));
                out[0] = mdp.sample_next(si, ai, noise) as f64;
            }
        }
        self.state_space.project(out);
    }

    /// Checked single step: inputs must be finite and of the right length.
    pub fn step(&self, s: &[f64], a: &[f64], noise: f64) -> Result<Vec<f64>> {
        self.check_pair(s, a)?;
        if !noise.is_finite() {
            return Err(Error::InvalidInput("noise draw must be finite".into()));
        }
        let mut out = vec![0.0; self.state_space.dims()];
        self.step_into(s, a, noise, &mut out);
        Ok(out)
    }

    fn check_pair(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_space.dims() || a.len() != self.action_space.dims() {
            return Err(Error::InvalidInput(format!(
                "expected state of dim {} and action of dim {}",
                self.state_space.dims(),
                self.action_space.dims()
            )));
        }
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("state and action must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let u = a[0];
        match &self.dynamics {
            Dynamics::InvertedPendulum => -0.1 * u * u + (s[0].cos() - 1.0).exp(),
            Dynamics::MountainCar => {
                if s[0] >= MOUNTAIN_CAR_GOAL {
                    10.0
                } else {
                    -1.0
                }
            }
            Dynamics::DoubleIntegrator => -0.5 * (s[0] * s[0] + s[1] * s[1]),
            Dynamics::CartPole(_) => (15.0 * s[0]).cos().powi(4),
            Dynamics::Acrobot(_) => (-s[0].cos() - 1.0).exp() + (-(s[0] + s[2]).cos() - 1.0).exp(),
            Dynamics::SyntheticRank1 => (1.0 + s[0]) * (1.0 + u) - 3.0 * self.gamma,
            Dynamics::Finite(mdp) => mdp.reward[(finite_index(s[0], mdp.n_states), finite_index(u, mdp.n_actions))],
        }
    }

    /// One noise draw from `rng`: Gaussian `N(μ, σ²)` for continuous tasks,
    /// uniform on `[0,1)` for finite MDPs.
    #[inline]
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.dynamics {
            Dynamics::Finite(_) => rng.random::<f64>(),
            _ => {
                let z: f64 = rng.sample(StandardNormal);
                self.noise_mu + self.noise_sigma * z
            }
        }
    }

    /// Draws one transition from the generative model.
    pub fn sample_transition<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mut next = vec![0.0; self.state_space.dims()];
        let noise = self.draw_noise(rng);
        self.step_into(s, a, noise, &mut next);
        (next, self.reward(s, a))
    }
}

#[inline]
fn finite_index(v: f64, n: usize) -> usize {
    (v.round().max(0.0) as usize).min(n - 1)
}

/// Generative model with a shared sample counter.
#[derive(Debug)]
pub struct GenerativeModel {
    spec: Arc<MdpSpec>,
    samples: AtomicU64,
}

impl GenerativeModel {
    pub fn new(spec: Arc<MdpSpec>) -> Self {
        Self { spec, samples: AtomicU64::new(0) }
    }

    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    /// Draws one next state into `out` and returns the reward `R(s,a)`.
    #[inline]
    pub fn sample_into<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R, out: &mut [f64]) -> f64 {
        self.samples.fetch_add(1, Ordering::Relaxed);
        let noise = self.spec.draw_noise(rng);
        self.spec.step_into(s, a, noise, out);
        self.spec.reward(s, a)
    }

    pub fn sample_transition<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mut next = vec![0.0; self.spec.state_space.dims()];
        let r = self.sample_into(s, a, rng, &mut next);
        (next, r)
    }

    pub fn samples(&self) -> u64 {
        self.samples.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_constants() {
        let p = make_env("inverted_pendulum").unwrap();
        assert_eq!(p.tau, 0.3);
        assert_eq!(p.noise_sigma, 0.1);
        assert_eq!(p.noise_mu, 0.0);
        assert_eq!((p.action_space.lower()[0], p.action_space.upper()[0]), (-1.0, 1.0));
        let c = make_env("cart_pole").unwrap();
        match c.dynamics {
            Dynamics::CartPole(cp) => {
                assert_eq!(cp.cart_mass, 1.0);
                assert_eq!(cp.pole_mass, 0.1);
                assert_eq!(cp.gravity, 9.8);
            }
            _ => unreachable!(),
        }
        assert_eq!(c.action_space.upper()[0], 10.0);
        let m = make_env("mountain_car").unwrap();
        assert_eq!(m.noise_sigma, 1e-3);
        let d = make_env("double_integrator").unwrap();
        assert_eq!((d.tau, d.noise_sigma), (0.1, 0.1));
        let a = make_env("acrobot").unwrap();
        match a.dynamics {
            Dynamics::Acrobot(ap) => {
                assert_eq!((ap.link_length_1, ap.link_length_2), (1.0, 1.0));
                assert_eq!((ap.link_com_1, ap.link_com_2), (0.5, 0.5));
                assert_eq!((ap.link_mass_1, ap.link_mass_2, ap.gravity), (1.0, 1.0, 9.8));
            }
            _ => unreachable!(),
        }
        assert!(matches!(make_env("no_such_env"), Err(Error::Config(_))));
    }

    #[test]
    fn step_examples() {
        let mc = make_env("mountain_car").unwrap();
        let next = mc.step(&[0.0, 0.0], &[1.0], 0.0).unwrap();
        assert_eq!(next[0], 0.0);
        assert!((next[1] - (-0.0015)).abs() < 1e-15);
        let p = make_env("inverted_pendulum").unwrap();
        assert_eq!(p.step(&[0.0, 0.0], &[0.0], 0.0).unwrap(), vec![0.0, 0.0]);
        let d = make_env("double_integrator").unwrap();
        assert_eq!(d.step(&[1.0, 0.0], &[0.0], 0.0).unwrap(), vec![1.0, 0.0]);
        assert!(d.step(&[f64::NAN, 0.0], &[0.0], 0.0).is_err());
        assert!(d.step(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn reward_examples() {
        let p = make_env("inverted_pendulum").unwrap();
        assert_eq!(p.reward(&[0.0, 0.0], &[0.0]), 1.0);
        let mc = make_env("mountain_car").unwrap();
        assert_eq!(mc.reward(&[0.6, 0.0], &[0.0]), 10.0);
        assert_eq!(mc.reward(&[0.4, 0.0], &[0.0]), -1.0);
        let d = make_env("double_integrator").unwrap();
        assert_eq!(d.reward(&[0.0, 0.0], &[0.3]), 0.0);
    }

    #[test]
    fn angles_wrap_and_velocities_clip() {
        let p = make_env("inverted_pendulum").unwrap();
        let next = p.step(&[3.1, 2.0], &[1.0], 0.0).unwrap();
        assert!(next[0] < 0.0 && next[0] >= -PI);
        assert!((next[0] - (3.1 + 0.6 - 2.0 * PI)).abs() < 1e-12);
        let next = p.step(&[0.0, 2.0], &[1.0], 5.0).unwrap();
        assert_eq!(next[1], 2.0);
    }

    #[test]
    fn projection_boundary_cases() {
        let s = BoxSpace::with_periodic(vec![-PI], vec![PI], vec![true]).unwrap();
        let mut x = [PI];
        s.project(&mut x);
        assert_eq!(x[0], -PI);
        let mut y = [-PI];
        s.project(&mut y);
        assert_eq!(y[0], -PI);
        assert!(BoxSpace::new(vec![1.0], vec![1.0]).is_err());
        assert!(BoxSpace::new(vec![], vec![]).is_err());
    }

    #[test]
    fn sample_transition_is_seed_deterministic() {
        let p = make_env("inverted_pendulum").unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(p.sample_transition(&[0.3, 0.1], &[0.5], &mut r1), p.sample_transition(&[0.3, 0.1], &[0.5], &mut r2));
    }

    #[test]
    fn zero_sigma_equals_noiseless_step() {
        let mut d = make_env("double_integrator").unwrap();
        d.set_param("noise_sigma", 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (next, r) = d.sample_transition(&[0.5, -0.2], &[0.7], &mut rng);
        assert_eq!(next, d.step(&[0.5, -0.2], &[0.7], 0.0).unwrap());
        assert_eq!(r, d.reward(&[0.5, -0.2], &[0.7]));
    }

    #[test]
    fn generative_model_counts_samples() {
        let model = GenerativeModel::new(Arc::new(make_env("mountain_car").unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..17 {
            model.sample_transition(&[-0.5, 0.0], &[0.0], &mut rng);
        }
        assert_eq!(model.samples(), 17);
    }

    #[test]
    fn noise_mean_matches() {
        // x' = x + ẋτ + noise with x = ẋ = u = 0 isolates the noise.
        let d = make_env("double_integrator").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mean = (0..n).map(|_| d.sample_transition(&[0.0, 0.0], &[0.0], &mut rng).0[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 * 0.1 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn set_param_validation() {
        let mut c = make_env("cart_pole").unwrap();
        c.set_param("pole_mass", 0.2).unwrap();
        assert!(c.set_param("link_mass_1", 1.0).is_err());
        assert!(c.set_param("gamma", 1.0).is_err());
        assert!(c.set_param("tau", -1.0).is_err());
        assert!(c.set_param("bogus", 1.0).is_err());
        c.set_state_bounds(vec![-1.0, -1.0, -1.0, -1.0], vec![1.0; 4]).unwrap();
        assert!(c.set_state_bounds(vec![-1.0], vec![1.0]).is_err());
    }

    #[test]
    fn finite_examples() {
        let single = make_finite_mdp("single_state", &FiniteMdpParams::default()).unwrap();
        assert_eq!(single.reward[(0, 0)], 1.0);
        let chain = make_finite_mdp(
            "chain",
            &FiniteMdpParams { n_states: 2, rewards: Some(vec![0.0, 1.0]), ..Default::default() },
        )
        .unwrap();
        assert_eq!(chain.next_distribution(0, 0), &[0.0, 1.0]);
        assert_eq!(chain.next_distribution(1, 0), &[0.0, 1.0]);
        let rand = make_finite_mdp(
            "random_stochastic",
            &FiniteMdpParams { n_states: 7, n_actions: 3, seed: 4, ..Default::default() },
        )
        .unwrap();
        for s in 0..7 {
            for a in 0..3 {
                let total: f64 = rand.next_distribution(s, a).iter().sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
        assert!(make_finite_mdp("chain", &FiniteMdpParams { n_states: 0, ..Default::default() }).is_err());
        assert!(make_finite_mdp("nope", &FiniteMdpParams::default()).is_err());
        assert!(make_finite_mdp("single_state", &FiniteMdpParams { n_states: 2, ..Default::default() }).is_err());
    }

    #[test]
    fn finite_embedding_roundtrips_indices() {
        let mdp = make_finite_mdp("chain", &FiniteMdpParams { n_states: 3, ..Default::default() }).unwrap();
        let spec = MdpSpec::from_finite("chain", mdp).unwrap();
        assert_eq!(spec.step(&[0.0], &[0.0], 0.3).unwrap(), vec![1.0]);
        assert_eq!(spec.step(&[2.0], &[0.0], 0.99).unwrap(), vec![2.0]);
        assert_eq!(spec.reward(&[2.0], &[0.0]), 1.0);
    }

    #[test]
    fn synthetic_q_star_is_bellman_consistent() {
        // Q*(s,a) = R(s,a) + γ E[max_a' Q*(s',a')] with E[1+s'] = 3/2 by symmetry.
        let env = make_env("synthetic_rank1").unwrap();
        let (s, a) = ([0.3], [0.8]);
        let q = env.analytic_q_star(&s, &a).unwrap();
        assert!((q - (env.reward(&s, &a) + env.gamma * 1.5 * 2.0)).abs() < 1e-12);
    }
}
