//! The search task: episode randomisation with a growing start region, agent
//! kinematics in the recorded flow, observations, shaped reward and
//! termination.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fieldstore::{FieldSample, FieldSeries};
use crate::flowsim::default_sources;
use crate::{Error, Result, Vec2};

/// Dimension of the observation vector `(c, dc/dx, dc/dy, u_f, v_f)`.
pub const OBS_DIM: usize = 5;
pub type Obs = [f64; OBS_DIM];

/// Slack on time queries so that `t0 + k dt` rounding never trips the
/// last-frame check.
const TIME_SLACK: f64 = 1e-9;
const RESET_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Agent speed.
    #[serde(rename = "U_a")]
    pub u_a: f64,
    /// Detection frequency; the decision step is `1/f`.
    pub f: f64,
    pub t0_range: [f64; 2],
    pub t_max: f64,
    /// Arrival radius.
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub zeta: f64,
    pub arrival_reward: f64,
    pub boundary_penalty: f64,
    pub timeout_penalty: f64,
    pub gamma_d: f64,
    #[serde(rename = "N_total")]
    pub n_total: usize,
    pub n_e: usize,
    pub gradient_floor: f64,
    pub source_positions: Vec<Vec2>,
    pub start_anchor: Vec2,
    /// Cylinder geometry, used to keep start positions out of the body.
    pub cylinder_center: Vec2,
    pub cylinder_diameter: f64,
    /// Per-channel affine map applied to observations: `(raw - offset) * scale`.
    pub obs_offset: Obs,
    pub obs_scale: Obs,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            u_a: 3.0,
            f: 10.0,
            t0_range: [0.0, 5.0],
            t_max: 55.0,
            delta: 0.2,
            alpha: 4.0,
            beta: 1.0,
            mu: 800.0,
            zeta: 2.5,
            arrival_reward: 3000.0,
            boundary_penalty: -200.0,
            timeout_penalty: -2000.0,
            gamma_d: 0.99,
            n_total: 10_000,
            n_e: 50,
            gradient_floor: 1e-8,
            source_positions: default_sources(),
            start_anchor: [16.0, 5.0],
            cylinder_center: [1.5, 5.0],
            cylinder_diameter: 1.0,
            obs_offset: [0.0; OBS_DIM],
            obs_scale: [1.0; OBS_DIM],
        }
    }
}

impl EnvConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.f
    }

    /// Episode length limit in decision steps.
    pub fn max_steps(&self) -> usize {
        (self.t_max * self.f).round() as usize
    }

    /// Checks the config on its own and against the usable window of `series`.
    pub fn validate(&self, window: Option<f64>) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.u_a > 0.0) {
            return bad(format!("U_a must be positive, got {}", self.u_a));
        }
        if !(self.f > 0.0) {
            return bad(format!("f must be positive, got {}", self.f));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.t_max > 0.0) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("mu", self.mu), ("zeta", self.zeta)] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma_d) {
            return bad(format!("gamma_d must lie in [0, 1], got {}", self.gamma_d));
        }
        let [lo, hi] = self.t0_range;
        if !(lo >= 0.0 && hi >= lo) {
            return bad(format!("t0_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"));
        }
        if let Some(w) = window {
            if hi + self.t_max > w + TIME_SLACK {
                return bad(format!("t0_range upper bound {hi} + t_max {} exceeds the field window {w}", self.t_max));
            }
        }
        if self.n_e == 0 || self.n_total == 0 {
            return bad("N_total and n_e must be positive".into());
        }
        if self.source_positions.is_empty() {
            return bad("at least one source position is required".into());
        }
        if self.obs_scale.iter().any(|s| !s.is_finite()) || self.obs_offset.iter().any(|s| !s.is_finite()) {
            return bad("observation normalization must be finite".into());
        }
        Ok(())
    }

    pub fn observe(&self, s: &FieldSample) -> Obs {
        let raw = [s.c, s.grad_c[0], s.grad_c[1], s.u_f[0], s.u_f[1]];
        let mut o = [0.0; OBS_DIM];
        for k in 0..OBS_DIM {
            o[k] = (raw[k] - self.obs_offset[k]) * self.obs_scale[k];
        }
        o
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn clipped(&self, lo: Vec2, hi: Vec2) -> Rect {
        Rect {
            min: [self.min[0].max(lo[0]), self.min[1].max(lo[1])],
            max: [self.max[0].min(hi[0]), self.max[1].min(hi[1])],
        }
    }
}

/// Curriculum level for episode `n`.
pub fn curriculum_level(n: usize, cfg: &EnvConfig) -> usize {
    n / cfg.n_e
}

/// Start region for episode `n`, centred on the start anchor. Grows linearly
/// from 1.5 x 1.5 to 5 x 2.5 over the training run. Not clipped; see
/// [`Rect::clipped`].
pub fn curriculum_region(n: usize, cfg: &EnvConfig) -> Rect {
    let top = cfg.n_total / cfg.n_e;
    let frac = if top == 0 { 1.0 } else { (curriculum_level(n, cfg) as f64 / top as f64).min(1.0) };
    let w = 1.5 + 3.5 * frac;
    let h = 1.5 + 1.0 * frac;
    let [cx, cy] = cfg.start_anchor;
    Rect { min: [cx - 0.5 * w, cy - 0.5 * h], max: [cx + 0.5 * w, cy + 0.5 * h] }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid may return exactly 2pi - eps rounding to 2pi
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    norm([a[0] - b[0], a[1] - b[1]])
}

/// Chemotaxis bonus minus time penalty.
pub fn base_reward(x_old: Vec2, x_new: Vec2, grad_c: Vec2, cfg: &EnvConfig) -> f64 {
    let d = [x_new[0] - x_old[0], x_new[1] - x_old[1]];
    let (nd, ng) = (norm(d), norm(grad_c));
    let cos = if nd == 0.0 || ng < cfg.gradient_floor { 0.0 } else { (d[0] * grad_c[0] + d[1] * grad_c[1]) / (nd * ng) };
    cfg.alpha * cos - cfg.beta * cfg.dt()
}

/// Potential `-|x - target| / U_a`.
pub fn potential(x: Vec2, target: Vec2, cfg: &EnvConfig) -> f64 {
    -dist(x, target) / cfg.u_a
}

pub fn shaping(x_old: Vec2, x_new: Vec2, target: Vec2, cfg: &EnvConfig) -> f64 {
    cfg.gamma_d * potential(x_new, target, cfg) - potential(x_old, target, cfg)
}

pub fn anneal(n: usize, cfg: &EnvConfig) -> f64 {
    cfg.mu * (-cfg.zeta * n as f64 / cfg.n_total as f64).exp()
}

/// Unsigned angle between two displacement vectors.
pub fn turning_angle(a: Vec2, b: Vec2) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("turning angle of a zero vector".into()));
    }
    let cos = ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Running,
    Arrived,
    Boundary,
    Timeout,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::Running
    }

    pub fn code(self) -> u8 {
        match self {
            Termination::Running => 0,
            Termination::Arrived => 1,
            Termination::Boundary => 2,
            Termination::Timeout => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Termination::Running,
            1 => Termination::Arrived,
            2 => Termination::Boundary,
            3 => Termination::Timeout,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Running => "running",
            Termination::Arrived => "arrived",
            Termination::Boundary => "boundary",
            Termination::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: Vec2,
    pub theta: f64,
    pub t: f64,
    pub episode_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub sample: FieldSample,
    pub observation: Obs,
    pub reward: f64,
    pub termination: Termination,
}

/// One episode against one recorded series of the bank.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    cfg: EnvConfig,
    bank: &'a [FieldSeries],
    source: usize,
    episode_index: usize,
    t0: f64,
    x0: Vec2,
    state: AgentState,
    /// Sample at the current position and time.
    sample: FieldSample,
    done: Termination,
}

impl<'a> Env<'a> {
    /// Starts an episode from the curriculum region of episode `n`.
    pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, bank: &'a [FieldSeries], n: usize, rng: &mut R) -> Result<Self> {
        Self::reset_in(cfg, bank, n, curriculum_region(n, cfg), rng)
    }

    /// Starts an episode from an explicit start region.
    pub fn reset_in<R: Rng + ?Sized>(
        cfg: &EnvConfig,
        bank: &'a [FieldSeries],
        n: usize,
        region: Rect,
        rng: &mut R,
    ) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Usage("empty field bank".into()));
        }
        let source = rng.gen_range(0..bank.len());
        let series = &bank[source];
        let (lo, hi) = series.bounds();
        let region = region.clipped(lo, hi);
        if !(region.width() >= 0.0 && region.height() >= 0.0) {
            return Err(Error::Config("start region lies outside the field domain".into()));
        }
        let target = series.source_position();
        let r_cyl = 0.5 * cfg.cylinder_diameter;
        let mut tries = 0;
        let x = loop {
            let x = [
                region.min[0] + rng.gen::<f64>() * region.width(),
                region.min[1] + rng.gen::<f64>() * region.height(),
            ];
            if dist(x, cfg.cylinder_center) > r_cyl && dist(x, target) >= cfg.delta {
                break x;
            }
            tries += 1;
            if tries >= RESET_RETRIES {
                return Err(Error::Config(format!("no valid start position after {RESET_RETRIES} draws")));
            }
        };
        // (-pi, pi]
        let theta = PI - 2.0 * PI * rng.gen::<f64>();
        let t0 = cfg.t0_range[0] + rng.gen::<f64>() * (cfg.t0_range[1] - cfg.t0_range[0]);
        let sample = sample_at(series, x, t0)?;
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            source,
            episode_index: n,
            t0,
            x0: x,
            state: AgentState { x, theta, t: t0, episode_step: 0 },
            sample,
            done: Termination::Running,
        })
    }

    /// Starts an episode at a fixed state; used by tests and replays.
    pub fn start_at(cfg: &EnvConfig, bank: &'a [FieldSeries], source: usize, n: usize, state: AgentState) -> Result<Self> {
        let series = bank.get(source).ok_or_else(|| Error::Usage(format!("no series for source {source}")))?;
        let sample = sample_at(series, state.x, state.t)?;
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            source,
            episode_index: n,
            t0: state.t,
            x0: state.x,
            state: AgentState { episode_step: 0, ..state },
            sample,
            done: Termination::Running,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn source_index(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> Vec2 {
        self.bank[self.source].source_position()
    }

    pub fn start_position(&self) -> Vec2 {
        self.x0
    }

    pub fn start_time(&self) -> f64 {
        self.t0
    }

    pub fn sample(&self) -> &FieldSample {
        &self.sample
    }

    pub fn observation(&self) -> Obs {
        self.cfg.observe(&self.sample)
    }

    pub fn termination(&self) -> Termination {
        self.done
    }

    /// Advances one decision step with heading increment `delta_theta`.
    pub fn step(&mut self, delta_theta: f64) -> Result<StepOutcome> {
        if self.done.is_done() {
            return Err(Error::Usage(format!("step called after termination ({})", self.done.as_str())));
        }
        if !delta_theta.is_finite() {
            return Err(Error::Usage(format!("non-finite heading increment {delta_theta}")));
        }
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let series = &self.bank[self.source];
        let target = series.source_position();
        let s = self.state;
        let theta = wrap_angle(s.theta + delta_theta);
        let uf = self.sample.u_f;
        let x_new = [
            s.x[0] + dt * (cfg.u_a * theta.cos() + uf[0]),
            s.x[1] + dt * (cfg.u_a * theta.sin() + uf[1]),
        ];
        let step = s.episode_step + 1;
        let t_new = self.t0 + step as f64 * dt;

        let mut reward =
            base_reward(s.x, x_new, self.sample.grad_c, cfg) + anneal(self.episode_index, cfg) * shaping(s.x, x_new, target, cfg);
        let termination = if dist(x_new, target) < cfg.delta {
            reward += cfg.arrival_reward;
            Termination::Arrived
        } else if !series.contains(x_new) {
            reward += cfg.boundary_penalty;
            Termination::Boundary
        } else if step >= cfg.max_steps() {
            reward += cfg.timeout_penalty;
            Termination::Timeout
        } else {
            Termination::Running
        };

        // outside the hull the observation is taken at the nearest hull point
        let (lo, hi) = series.bounds();
        let x_obs = [x_new[0].clamp(lo[0], hi[0]), x_new[1].clamp(lo[1], hi[1])];
        let sample = sample_at(series, x_obs, t_new)?;

        self.state = AgentState { x: x_new, theta, t: t_new, episode_step: step };
        self.sample = sample;
        self.done = termination;
        Ok(StepOutcome { sample, observation: self.cfg.observe(&sample), reward, termination })
    }
}

fn sample_at(series: &FieldSeries, x: Vec2, t: f64) -> Result<FieldSample> {
    let t = if t > series.t_last() && t <= series.t_last() + TIME_SLACK { series.t_last() } else { t };
    series.sample(x, t)
}
