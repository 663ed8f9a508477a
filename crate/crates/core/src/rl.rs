//! Cart-pole physics, tabular Q-learning, and robust state perturbations.
//!
//! The Q-table covers the pole angle `beta` and its rate only. The robust
//! agent replaces each sampled next state with an adversarial one that trades
//! lower reward against a squared-distance penalty `gamma * c`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPISODE_CAP: usize = 400;
pub const BETA_BINS: usize = 30;
pub const BETA_DOT_BINS: usize = 15;
pub const BETA_RANGE: f64 = 0.21;
pub const BETA_DOT_RANGE: f64 = 2.0;
pub const ROBUST_STEPS: usize = 10;
pub const ROBUST_STEPSIZE: f64 = 0.1;
/// Default adversary penalty for the robust agent. The largest shift it can
/// cause is `1 / (2 gamma)` in `beta`, here 0.01 rad per step.
pub const DEFAULT_RL_GAMMA: f64 = 50.0;

/// Names of the evaluation environments, easy ones first.
pub const VARIANTS: [&str; 7] = ["original", "light", "long", "soft-g", "heavy", "short", "strong-g"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleWorld {
    pub masscart: f64,
    pub masspole: f64,
    /// Half the pole length.
    pub length: f64,
    pub gravity: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub beta_limit: f64,
    pub x_limit: f64,
}

impl Default for CartPoleWorld {
    fn default() -> Self {
        Self {
            masscart: 1.0,
            masspole: 0.1,
            length: 0.5,
            gravity: 9.8,
            force_mag: 10.0,
            dt: 0.02,
            beta_limit: 12.0_f64.to_radians(),
            x_limit: 2.4,
        }
    }
}

impl CartPoleWorld {
    /// One of [`VARIANTS`], built from the default world.
    pub fn variant(name: &str) -> Result<Self> {
        let mut w = Self::default();
        match name {
            "original" => {}
            "light" => w.masspole /= 2.0,
            "heavy" => w.masspole *= 2.0,
            "long" => w.length *= 2.0,
            "short" => w.length /= 2.0,
            "soft-g" => w.gravity /= 5.0,
            "strong-g" => w.gravity *= 5.0,
            other => {
                return Err(Error::config(format!(
                    "unknown variant `{other}`, expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("masscart", self.masscart),
            ("masspole", self.masspole),
            ("length", self.length),
            ("gravity", self.gravity),
            ("force_mag", self.force_mag),
            ("dt", self.dt),
            ("beta_limit", self.beta_limit),
            ("x_limit", self.x_limit),
        ];
        match fields.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            Some((name, v)) => Err(Error::config(format!("world.{name} must be positive and finite, got {v}"))),
            None => Ok(()),
        }
    }

    pub fn failed(&self, s: &FullState) -> bool {
        s.x.abs() > self.x_limit || s.beta.abs() > self.beta_limit
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub x: f64,
    pub x_dot: f64,
    pub beta: f64,
    pub beta_dot: f64,
}

impl FullState {
    pub fn new(x: f64, x_dot: f64, beta: f64, beta_dot: f64) -> Self {
        Self { x, x_dot, beta, beta_dot }
    }

    /// All coordinates uniform in `[-0.05, 0.05]`.
    pub fn random_start(rng: &mut impl Rng) -> Self {
        let mut u = || rng.random_range(-0.05..=0.05);
        Self::new(u(), u(), u(), u())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Left, Action::Right];

    fn index(self) -> usize {
        self as usize
    }
}

pub fn reward(beta: f64) -> f64 {
    (-beta.abs()).exp()
}

/// One Euler step. Returns the next state, its reward and whether it failed.
pub fn step(world: &CartPoleWorld, s: &FullState, a: Action) -> (FullState, f64, bool) {
    let force = match a {
        Action::Left => -world.force_mag,
        Action::Right => world.force_mag,
    };
    let total_mass = world.masscart + world.masspole;
    let polemass_length = world.masspole * world.length;
    let (sin, cos) = s.beta.sin_cos();
    let temp = (force + polemass_length * s.beta_dot * s.beta_dot * sin) / total_mass;
    let beta_acc =
        (world.gravity * sin - cos * temp) / (world.length * (4.0 / 3.0 - world.masspole * cos * cos / total_mass));
    let x_acc = temp - polemass_length * beta_acc * cos / total_mass;
    let next = FullState {
        x: s.x + world.dt * s.x_dot,
        x_dot: s.x_dot + world.dt * x_acc,
        beta: s.beta + world.dt * s.beta_dot,
        beta_dot: s.beta_dot + world.dt * beta_acc,
    };
    (next, reward(next.beta), world.failed(&next))
}

/// Action values over a 30 x 15 grid of `(beta, beta_dot)` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    values: Vec<f64>,
    pub discount: f64,
}

fn bin(v: f64, range: f64, bins: usize) -> usize {
    let t = (v + range) / (2.0 * range) * bins as f64;
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

fn bin_center(k: usize, range: f64, bins: usize) -> f64 {
    -range + (k as f64 + 0.5) * 2.0 * range / bins as f64
}

impl QTable {
    pub fn new(discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::config(format!("discount must lie in (0, 1), got {discount}")));
        }
        Ok(Self { values: vec![0.0; BETA_BINS * BETA_DOT_BINS * 2], discount })
    }

    /// Cell indices, clamped to the edge bins.
    pub fn cell(s: &FullState) -> (usize, usize) {
        (bin(s.beta, BETA_RANGE, BETA_BINS), bin(s.beta_dot, BETA_DOT_RANGE, BETA_DOT_BINS))
    }

    /// `(beta, beta_dot)` at the center of a cell.
    pub fn center(i: usize, j: usize) -> (f64, f64) {
        (bin_center(i, BETA_RANGE, BETA_BINS), bin_center(j, BETA_DOT_RANGE, BETA_DOT_BINS))
    }

    fn offset(i: usize, j: usize, a: Action) -> usize {
        (i * BETA_DOT_BINS + j) * 2 + a.index()
    }

    pub fn get_cell(&self, i: usize, j: usize, a: Action) -> f64 {
        self.values[Self::offset(i, j, a)]
    }

    pub fn set_cell(&mut self, i: usize, j: usize, a: Action, v: f64) {
        self.values[Self::offset(i, j, a)] = v;
    }

    pub fn get(&self, s: &FullState, a: Action) -> f64 {
        let (i, j) = Self::cell(s);
        self.get_cell(i, j, a)
    }

    fn max_cell(&self, i: usize, j: usize) -> f64 {
        self.get_cell(i, j, Action::Left).max(self.get_cell(i, j, Action::Right))
    }

    pub fn max_q(&self, s: &FullState) -> f64 {
        let (i, j) = Self::cell(s);
        self.max_cell(i, j)
    }

    /// Greedy action; ties go left.
    pub fn greedy(&self, s: &FullState) -> Action {
        if self.get(s, Action::Right) > self.get(s, Action::Left) {
            Action::Right
        } else {
            Action::Left
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let q: Self = serde_json::from_str(text)?;
        if q.values.len() != BETA_BINS * BETA_DOT_BINS * 2 {
            return Err(Error::DimensionMismatch {
                context: "q-table values",
                expected: BETA_BINS * BETA_DOT_BINS * 2,
                got: q.values.len(),
            });
        }
        if q.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "q-table values" });
        }
        Self::new(q.discount)?;
        Ok(q)
    }
}

/// `Q(s,a) += alpha (r + discount max_a' Q(s',a') - Q(s,a))`; terminal
/// transitions drop the bootstrap term.
pub fn q_update(q: &mut QTable, s: &FullState, a: Action, s_next: &FullState, r: f64, alpha: f64, terminal: bool) {
    let (i, j) = QTable::cell(s);
    let old = q.get_cell(i, j, a);
    let target = if terminal { r } else { r + q.discount * q.max_q(s_next) };
    q.set_cell(i, j, a, old + alpha * (target - old));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustMode {
    /// Minimize `r(s) + gamma c(s, s_hat)` by gradient descent on `(beta, beta_dot)`.
    DropQTerm,
    /// Exact minimization of `r + discount max_a Q + gamma c` over cell centers.
    OverCovering,
}

impl std::str::FromStr for RobustMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop_q_term" => Ok(RobustMode::DropQTerm),
            "over_covering" => Ok(RobustMode::OverCovering),
            other => Err(Error::config(format!(
                "unknown robust mode `{other}`, expected drop_q_term or over_covering"
            ))),
        }
    }
}

fn state_cost(beta: f64, beta_dot: f64, s_hat: &FullState) -> f64 {
    (beta - s_hat.beta).powi(2) + (beta_dot - s_hat.beta_dot).powi(2)
}

/// Adversarial replacement for the sampled next state `s_hat`. Cart
/// coordinates are left alone.
pub fn robust_next_state(q: &QTable, s_hat: &FullState, gamma: f64, mode: RobustMode) -> FullState {
    match mode {
        RobustMode::DropQTerm => {
            let objective = |b: f64, bd: f64| reward(b) + gamma * state_cost(b, bd, s_hat);
            // the reward is flat in beta_dot, so only beta moves; at beta = 0
            // the subgradient direction follows the angular velocity
            let away = if s_hat.beta != 0.0 {
                s_hat.beta.signum()
            } else if s_hat.beta_dot != 0.0 {
                s_hat.beta_dot.signum()
            } else {
                1.0
            };
            let (mut b, bd) = (s_hat.beta, s_hat.beta_dot);
            let mut value = objective(b, bd);
            let mut scale = 1.0;
            for t in 1..=ROBUST_STEPS {
                let sign = if b != 0.0 { b.signum() } else { away };
                let grad = -sign * reward(b) + 2.0 * gamma * (b - s_hat.beta);
                let cand = b - scale * ROBUST_STEPSIZE / (t as f64).sqrt() * grad;
                let v = objective(cand, bd);
                if v < value {
                    b = cand;
                    value = v;
                } else {
                    scale *= 0.5;
                }
            }
            FullState { beta: b, beta_dot: bd, ..*s_hat }
        }
        RobustMode::OverCovering => {
            let mut best = (f64::INFINITY, s_hat.beta, s_hat.beta_dot);
            for i in 0..BETA_BINS {
                for j in 0..BETA_DOT_BINS {
                    let (b, bd) = QTable::center(i, j);
                    let v = reward(b) + q.discount * q.max_cell(i, j) + gamma * state_cost(b, bd, s_hat);
                    if v < best.0 {
                        best = (v, b, bd);
                    }
                }
            }
            FullState { beta: best.1, beta_dot: best.2, ..*s_hat }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub episodes: usize,
    pub alpha: f64,
    pub discount: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Adversary penalty; `None` trains the nominal agent.
    pub gamma: Option<f64>,
    pub mode: RobustMode,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            alpha: 0.1,
            discount: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            gamma: None,
            mode: RobustMode::DropQTerm,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn nominal(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn robust(gamma: f64, seed: u64) -> Self {
        Self { seed, gamma: Some(gamma), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("agent.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::config("agent.eps_start and agent.eps_end must lie in [0, 1]"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config(format!("agent.gamma must be positive and finite, got {g}")));
            }
        }
        QTable::new(self.discount).map(|_| ())
    }

    /// Exploration rate: linear from `eps_start` to `eps_end` over the first
    /// half of training, then flat.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let half = (self.episodes / 2).max(1) as f64;
        let t = (episode as f64 / half).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedAgent {
    pub q: QTable,
    /// Length of every training episode.
    pub lengths: Vec<usize>,
}

impl TrainedAgent {
    pub fn lengths_csv(&self) -> String {
        let mut out = String::from("episode,length\n");
        for (k, l) in self.lengths.iter().enumerate() {
            out.push_str(&format!("{k},{l}\n"));
        }
        out
    }
}

/// Epsilon-greedy tabular Q-learning. With `cfg.gamma` set, each sampled
/// next state is replaced by [`robust_next_state`] before the update and the
/// episode continues from the perturbed state.
pub fn train_agent(world: &CartPoleWorld, cfg: &AgentConfig) -> Result<TrainedAgent> {
    world.validate()?;
    cfg.validate()?;
    let mut q = QTable::new(cfg.discount)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut lengths = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let eps = cfg.epsilon(episode);
        let mut s = FullState::random_start(&mut rng);
        let mut len = 0;
        while len < EPISODE_CAP {
            let a = if rng.random::<f64>() < eps {
                Action::ALL[rng.random_range(0..2)]
            } else {
                q.greedy(&s)
            };
            let (mut next, mut r, mut done) = step(world, &s, a);
            if let Some(gamma) = cfg.gamma {
                next = robust_next_state(&q, &next, gamma, cfg.mode);
                r = reward(next.beta);
                done = world.failed(&next);
            }
            // the table cannot see the cart position, so leaving the track
            // and hitting the cap are both truncations that still bootstrap
            let terminal = next.beta.abs() > world.beta_limit;
            q_update(&mut q, &s, a, &next, r, cfg.alpha, terminal);
            len += 1;
            s = next;
            if done {
                break;
            }
        }
        lengths.push(len);
    }
    Ok(TrainedAgent { q, lengths })
}

/// Greedy episode length from `start`.
pub fn rollout(q: &QTable, world: &CartPoleWorld, start: FullState) -> usize {
    let mut s = start;
    for t in 0..EPISODE_CAP {
        let (next, _, done) = step(world, &s, q.greedy(&s));
        if done {
            return t + 1;
        }
        s = next;
    }
    EPISODE_CAP
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: f64,
    pub stderr: f64,
}

/// Greedy rollouts from `trials` random starts; `stderr` is the sample
/// standard deviation over `sqrt(trials)` (0 for a single trial).
pub fn evaluate(q: &QTable, world: &CartPoleWorld, trials: usize, seed: u64) -> Result<Evaluation> {
    world.validate()?;
    if trials == 0 {
        return Err(Error::EmptyInput { context: "evaluation trials" });
    }
    let lengths: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            rollout(q, world, FullState::random_start(&mut rng)) as f64
        })
        .collect();
    let n = trials as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let stderr = if trials > 1 {
        (lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(Evaluation { mean, stderr })
}

/// `(variant, evaluation)` for every entry of [`VARIANTS`].
pub fn evaluate_variants(q: &QTable, trials: usize, seed: u64) -> Result<Vec<(&'static str, Evaluation)>> {
    VARIANTS
        .iter()
        .map(|&v| Ok((v, evaluate(q, &CartPoleWorld::variant(v)?, trials, seed)?)))
        .collect()
}
