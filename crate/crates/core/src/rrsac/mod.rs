//! Recurrent soft actor-critic trained on random fixed-length windows drawn
//! from stored episodes.
//!
//! Every update samples a batch of windows, replays the burn-in prefix to
//! warm each network's recurrent state, then performs in order: a critic step
//! towards the soft Bellman target, an actor step against the freshly updated
//! critics, a temperature step, and a soft update of the target critics. Burn
//! in steps and padding never enter a loss.

pub mod persist;
pub mod replay;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, Termination, OBS_DIM};
use crate::fieldstore::FieldSeries;
use crate::nnet::{policy_forward, sample_action, sigmoid, softplus, Adam, InitScheme, NetSpec, Network, RecurrentState, SeqInput, SPREAD_FLOOR};
use crate::{Error, Result};

pub use self::replay::{sample_segments, BatchTensors, EpisodeRecord, ReplayStore, Segment, SegmentBatch, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitName {
    Normal,
    Orthogonal,
}

impl From<InitName> for InitScheme {
    fn from(n: InitName) -> Self {
        match n {
            InitName::Normal => InitScheme::Normal,
            InitName::Orthogonal => InitScheme::Orthogonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Memory length in time units; the window is `round(T_M f)` steps.
    #[serde(rename = "T_M")]
    pub t_m: Option<f64>,
    /// Memory length in steps; takes precedence over `T_M`.
    pub window_steps: Option<usize>,
    pub burn_in: usize,
    pub batch: usize,
    pub capacity: usize,
    /// Updates start once the env-step counter exceeds this.
    pub update_start: u64,
    pub update_every: u64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub tau: f64,
    pub target_entropy: f64,
    pub init_temperature: f64,
    pub dense_init: InitName,
    pub recurrent_init: InitName,
    pub seed: u64,
    /// Checkpoint cadence in episodes (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// Writes zero in the wall-time log column so logs are bit-reproducible.
    pub zero_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_m: Some(1.0),
            window_steps: None,
            burn_in: 10,
            batch: 64,
            capacity: 50_000,
            update_start: 500,
            update_every: 10,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            lr_temperature: 1e-4,
            tau: 0.002,
            target_entropy: -1.0,
            init_temperature: 1.0,
            dense_init: InitName::Normal,
            recurrent_init: InitName::Orthogonal,
            seed: 0,
            checkpoint_every: 100,
            zero_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Training window in steps for detection frequency `f`.
    pub fn window(&self, f: f64) -> Result<usize> {
        let w = match (self.window_steps, self.t_m) {
            (Some(w), _) => w,
            (None, Some(t)) => (t * f).round() as usize,
            (None, None) => return Err(Error::Config("either T_M or window_steps must be given".into())),
        };
        if w == 0 {
            return Err(Error::Config("memory window must be at least one step".into()));
        }
        Ok(w)
    }

    pub fn validate(&self, f: f64) -> Result<()> {
        self.window(f)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.capacity == 0 || self.update_every == 0 {
            return bad("batch, capacity and update_every must be positive".into());
        }
        for (name, v) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("lr_temperature", self.lr_temperature)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.init_temperature > 0.0) {
            return bad(format!("init_temperature must be positive, got {}", self.init_temperature));
        }
        Ok(())
    }
}

/// The fixed network topologies of the agent.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: Network,
    pub critic: Network,
}

impl Agent {
    pub fn new(actor: NetSpec, critic: NetSpec) -> Result<Self> {
        if actor.output_dim != 2 || actor.action_dim != 0 {
            return Err(Error::Usage("actor must map observations to (mean, raw spread)".into()));
        }
        if critic.output_dim != 1 || critic.action_dim != 1 {
            return Err(Error::Usage("critic must take one action and return one value".into()));
        }
        if actor.input_dim != OBS_DIM || critic.input_dim != OBS_DIM {
            return Err(Error::Usage(format!("networks must read {OBS_DIM}-component observations")));
        }
        Ok(Self { actor: Network::new(actor)?, critic: Network::new(critic)? })
    }

    pub fn standard() -> Self {
        Self::new(NetSpec::policy(OBS_DIM), NetSpec::critic(OBS_DIM)).expect("standard topology is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub actor: Vec<f64>,
    pub critic1: Vec<f64>,
    pub critic2: Vec<f64>,
    pub target1: Vec<f64>,
    pub target2: Vec<f64>,
    pub log_xi: f64,
    pub adam_actor: Adam,
    pub adam_critic1: Adam,
    pub adam_critic2: Adam,
    pub adam_xi: Adam,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub rng: ChaCha8Rng,
    pub store: ReplayStore,
}

impl TrainState {
    pub fn new(agent: &Agent, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, r) = (cfg.dense_init.into(), cfg.recurrent_init.into());
        let actor = agent.actor.init_params(d, r, &mut rng);
        let critic1 = agent.critic.init_params(d, r, &mut rng);
        let critic2 = agent.critic.init_params(d, r, &mut rng);
        Self {
            adam_actor: Adam::new(actor.len()),
            adam_critic1: Adam::new(critic1.len()),
            adam_critic2: Adam::new(critic2.len()),
            adam_xi: Adam::new(1),
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_xi: cfg.init_temperature.ln(),
            env_steps: 0,
            episodes: 0,
            updates: 0,
            rng,
            store: ReplayStore::new(cfg.capacity),
        }
    }

    pub fn xi(&self) -> f64 {
        self.log_xi.exp()
    }
}

/// Soft Bellman backup for one transition.
pub fn critic_target(reward: f64, terminal: bool, min_q_next: f64, xi: f64, log_pi_next: f64, gamma_d: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma_d * (min_q_next - xi * log_pi_next)
    }
}

/// `target <- tau * source + (1 - tau) * target`.
pub fn soft_update(target: &mut [f64], source: &[f64], tau: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = tau * s + (1.0 - tau) * *t;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub xi: f64,
    /// False when the batch had no real training steps and nothing changed.
    pub applied: bool,
}

struct PolicyEval {
    /// Per column and row: mean, spread, raw spread.
    mean: Vec<f64>,
    spread: Vec<f64>,
    raw: Vec<f64>,
}

fn eval_policy(agent: &Agent, params: &[f64], t: &BatchTensors) -> Result<(crate::nnet::Forward, PolicyEval)> {
    let input = SeqInput { steps: t.steps, batch: t.batch, obs: &t.obs, actions: None, active: Some(&t.active) };
    let fwd = agent.actor.forward(params, &input, None)?;
    let rows = t.steps * t.batch;
    let mut pe = PolicyEval { mean: vec![0.0; rows], spread: vec![0.0; rows], raw: vec![0.0; rows] };
    for r in 0..rows {
        pe.mean[r] = fwd.output[2 * r];
        pe.raw[r] = fwd.output[2 * r + 1];
        pe.spread[r] = softplus(pe.raw[r]) + SPREAD_FLOOR;
    }
    Ok((fwd, pe))
}

fn critic_values(agent: &Agent, params: &[f64], t: &BatchTensors, actions: &[f64]) -> Result<crate::nnet::Forward> {
    let input = SeqInput { steps: t.steps, batch: t.batch, obs: &t.obs, actions: Some(actions), active: Some(&t.active) };
    agent.critic.forward(params, &input, None)
}

fn diagnostics(st: &TrainState, t: &BatchTensors, what: &str, v: f64) -> Error {
    Error::Training {
        message: format!("non-finite {what} ({v}) at update {}", st.updates),
        diagnostics: format!(
            "env_steps={} episodes={} xi={} masked_steps={} reward_range=[{}, {}]",
            st.env_steps,
            st.episodes,
            st.xi(),
            t.masked_count(),
            t.rewards.iter().cloned().fold(f64::INFINITY, f64::min),
            t.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ),
    }
}

/// Soft Bellman targets for every training step of the batch, indexed like
/// `t.mask`. `eps` holds the standard-normal draws for the next actions.
fn soft_targets(
    agent: &Agent,
    targets: [&[f64]; 2],
    pol: &PolicyEval,
    eps: &[f64],
    t: &BatchTensors,
    xi: f64,
    gamma_d: f64,
) -> Result<Vec<f64>> {
    let (n, bmax) = (t.batch, t.burn_in);
    let a_next: Vec<f64> = (0..t.steps * n).map(|r| pol.mean[r] + pol.spread[r] * eps[r]).collect();
    let q1 = critic_values(agent, targets[0], t, &a_next)?.output;
    let q2 = critic_values(agent, targets[1], t, &a_next)?.output;
    let mut y = vec![0.0; t.window * n];
    for k in 0..t.window {
        for b in 0..n {
            let i = k * n + b;
            if t.mask[i] == 0.0 {
                continue;
            }
            let r = (bmax + k + 1) * n + b;
            let logp = -0.5 * eps[r] * eps[r] - pol.spread[r].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            y[i] = critic_target(t.rewards[i], t.terminal[i] > 0.0, q1[r].min(q2[r]), xi, logp, gamma_d);
        }
    }
    Ok(y)
}

/// One full update on a prepared batch.
pub fn update(agent: &Agent, st: &mut TrainState, t: &BatchTensors, cfg: &TrainConfig, gamma_d: f64) -> Result<UpdateStats> {
    let nmask = t.masked_count();
    if nmask == 0 {
        return Ok(UpdateStats { xi: st.xi(), ..Default::default() });
    }
    let (n, bmax, w) = (t.batch, t.burn_in, t.window);
    let rows = t.steps * n;
    let inv_n = 1.0 / nmask as f64;
    let xi = st.xi();

    // current policy at every column, with two independent reparameterised draws
    let (afwd, pol) = eval_policy(agent, &st.actor, t)?;
    let mut eps_next = vec![0.0; rows];
    let mut eps_pi = vec![0.0; rows];
    for e in eps_next.iter_mut().chain(eps_pi.iter_mut()) {
        *e = StandardNormal.sample(&mut st.rng);
    }
    let logp = |r: usize, e: f64| -0.5 * e * e - pol.spread[r].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let y = soft_targets(agent, [&st.target1, &st.target2], &pol, &eps_next, t, xi, gamma_d)?;

    // critics
    let mut critic_loss = 0.0;
    for which in 0..2 {
        let params = if which == 0 { &st.critic1 } else { &st.critic2 };
        let fwd = critic_values(agent, params, t, &t.actions)?;
        let mut d_out = vec![0.0; rows];
        let mut loss = 0.0;
        for k in 0..w {
            for b in 0..n {
                let i = k * n + b;
                if t.mask[i] == 0.0 {
                    continue;
                }
                let r = (bmax + k) * n + b;
                let e = fwd.output[r] - y[i];
                loss += e * e * inv_n;
                d_out[r] = 2.0 * e * inv_n;
            }
        }
        if !loss.is_finite() {
            return Err(diagnostics(st, t, "critic loss", loss));
        }
        critic_loss += 0.5 * loss;
        let g = agent.critic.backward(params, &fwd, &d_out, bmax)?;
        if which == 0 {
            st.adam_critic1.step(&mut st.critic1, &g.params, cfg.lr_critic)?;
        } else {
            st.adam_critic2.step(&mut st.critic2, &g.params, cfg.lr_critic)?;
        }
    }

    // actor against the updated critics
    let a_pi: Vec<f64> = (0..rows).map(|r| pol.mean[r] + pol.spread[r] * eps_pi[r]).collect();
    let f1 = critic_values(agent, &st.critic1, t, &a_pi)?;
    let f2 = critic_values(agent, &st.critic2, t, &a_pi)?;
    let mut seed1 = vec![0.0; rows];
    let mut seed2 = vec![0.0; rows];
    let mut actor_loss = 0.0;
    let mut logp_sum = 0.0;
    for k in 0..w {
        for b in 0..n {
            if t.mask[k * n + b] == 0.0 {
                continue;
            }
            let r = (bmax + k) * n + b;
            let (q1, q2) = (f1.output[r], f2.output[r]);
            if q1 <= q2 {
                seed1[r] = 1.0;
            } else {
                seed2[r] = 1.0;
            }
            let lp = logp(r, eps_pi[r]);
            logp_sum += lp;
            actor_loss += (xi * lp - q1.min(q2)) * inv_n;
        }
    }
    if !actor_loss.is_finite() {
        return Err(diagnostics(st, t, "actor loss", actor_loss));
    }
    let qa1 = agent.critic.action_grad(&st.critic1, &f1, &seed1)?;
    let qa2 = agent.critic.action_grad(&st.critic2, &f2, &seed2)?;
    let mut d_pol = vec![0.0; rows * 2];
    for k in 0..w {
        for b in 0..n {
            if t.mask[k * n + b] == 0.0 {
                continue;
            }
            let r = (bmax + k) * n + b;
            let qa = qa1[r] + qa2[r];
            let s = pol.spread[r];
            // log pi of a reparameterised draw depends on the spread only
            let d_mean = -qa * inv_n;
            let d_spread = (-xi / s - qa * eps_pi[r]) * inv_n;
            d_pol[2 * r] = d_mean;
            d_pol[2 * r + 1] = d_spread * sigmoid(pol.raw[r]);
        }
    }
    let g = agent.actor.backward(&st.actor, &afwd, &d_pol, bmax)?;
    st.adam_actor.step(&mut st.actor, &g.params, cfg.lr_actor)?;

    // temperature: minimise -xi (log pi + H)
    let mean_logp = logp_sum * inv_n;
    let grad_log_xi = -xi * (mean_logp + cfg.target_entropy);
    let mut lx = [st.log_xi];
    st.adam_xi.step(&mut lx, &[grad_log_xi], cfg.lr_temperature)?;
    st.log_xi = lx[0];

    soft_update(&mut st.target1, &st.critic1, cfg.tau);
    soft_update(&mut st.target2, &st.critic2, cfg.tau);
    st.updates += 1;
    Ok(UpdateStats { critic_loss, actor_loss, xi: st.xi(), applied: true })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub steps: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub success: bool,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub xi: f64,
    pub wall_time: f64,
}

impl EpisodeLog {
    pub const CSV_HEADER: &'static str = "episode,steps,return,success,critic_loss,actor_loss,xi,wall_time";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            self.steps,
            self.ret,
            self.success as u8,
            self.critic_loss,
            self.actor_loss,
            self.xi,
            self.wall_time
        )
    }
}

/// Callbacks from the training loop.
pub trait TrainObserver {
    fn episode(&mut self, _log: &EpisodeLog) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` episodes and at the end.
    fn checkpoint(&mut self, _agent: &Agent, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs one episode with the stochastic policy and returns its records.
pub fn rollout<R: Rng + ?Sized>(
    agent: &Agent,
    actor: &[f64],
    env: &mut Env<'_>,
    rng: &mut R,
    mut on_step: impl FnMut(&mut R) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut h = RecurrentState::zeros(1, agent.actor.hidden());
    let mut obs = env.observation();
    let mut steps = Vec::new();
    loop {
        let (head, next) = policy_forward(&agent.actor, actor, &obs, &h)?;
        h = next;
        let (a, _) = sample_action(&head, rng);
        let out = env.step(a)?;
        steps.push(StepRecord { obs, action: a, reward: out.reward, done: out.termination, next_obs: out.observation });
        obs = out.observation;
        on_step(rng)?;
        if out.termination.is_done() {
            return Ok(steps);
        }
    }
}

/// Trains from `state` (fresh or resumed) until `env_cfg.n_total` episodes.
pub fn train(
    agent: &Agent,
    state: &mut TrainState,
    cfg: &TrainConfig,
    env_cfg: &EnvConfig,
    bank: &[FieldSeries],
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate(env_cfg.f)?;
    let window_len = bank.first().map(|s| s.t_last() - s.t0());
    env_cfg.validate(window_len)?;
    let window = cfg.window(env_cfg.f)?;
    let clock = Instant::now();
    let mut last = UpdateStats { xi: state.xi(), ..Default::default() };

    while (state.episodes as usize) < env_cfg.n_total {
        let n = state.episodes as usize;
        let mut rng = std::mem::replace(&mut state.rng, ChaCha8Rng::seed_from_u64(0));
        let mut env = Env::reset(env_cfg, bank, n, &mut rng)?;
        let actor = state.actor.clone();
        let result = rollout(agent, &actor, &mut env, &mut rng, |rng| {
            state.env_steps += 1;
            if state.env_steps > cfg.update_start && state.env_steps % cfg.update_every == 0 && !state.store.is_empty() {
                let sb = sample_segments(&state.store, rng, window, cfg.burn_in, cfg.batch)?;
                let tensors = BatchTensors::build(&state.store, &sb);
                std::mem::swap(&mut state.rng, rng);
                let r = update(agent, state, &tensors, cfg, env_cfg.gamma_d);
                std::mem::swap(&mut state.rng, rng);
                let s = r?;
                if s.applied {
                    last = s;
                }
            }
            Ok(())
        });
        state.rng = rng;
        let steps = result?;
        let success = steps.last().map(|s| s.done) == Some(Termination::Arrived);
        let ret: f64 = steps.iter().map(|s| s.reward).sum();
        let len = steps.len();
        state.store.push_episode(steps, n)?;
        state.episodes += 1;
        let log = EpisodeLog {
            episode: n as u64,
            steps: len,
            ret,
            success,
            critic_loss: last.critic_loss,
            actor_loss: last.actor_loss,
            xi: state.xi(),
            wall_time: if cfg.zero_wall_time { 0.0 } else { clock.elapsed().as_secs_f64() },
        };
        observer.episode(&log)?;
        let done = state.episodes as usize == env_cfg.n_total;
        if done || (cfg.checkpoint_every > 0 && state.episodes as usize % cfg.checkpoint_every == 0) {
            observer.checkpoint(agent, state)?;
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests;
