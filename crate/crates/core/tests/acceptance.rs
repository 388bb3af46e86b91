//! Acceptance suite. Prints one line per criterion and exits nonzero if a
//! hard criterion fails.
//!
//! `cargo test --test acceptance -- [filter]` runs the criteria whose label
//! contains `filter`. Set `ODORLAB_FULL_TRAINING=1` to run the training
//! criterion at full length (2000 episodes per memory length, hours on one
//! core) instead of the reduced default.

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use odorlab::analysis::{
    collapse_fit, evaluate, extract_fingerprint, summarize, write_trials_csv, Condition, EvalConfig, FingerprintConfig,
    NetPolicy, StepLog, TrialRecord, EXPONENT_CUTOFF,
};
use odorlab::env::{
    anneal, base_reward, potential, shaping, wrap_angle, Env, EnvConfig, Termination, OBS_DIM,
};
use odorlab::fieldstore::{self, FieldMeta, FieldSeries};
use odorlab::flowsim::scalar::{total_mass, ScalarTransport, SourceTerm};
use odorlab::flowsim::{run_bank, RunDiagnostics, SimConfig, DIVERGENCE_TOL};
use odorlab::nnet::{InitScheme, NetSpec, Network, SeqInput};
use odorlab::rrsac::{
    sample_segments, train, Agent, BatchTensors, EpisodeLog, ReplayStore, StepRecord, TrainConfig, TrainObserver,
    TrainState,
};
use odorlab::sector::{self, normalized_u_eff, u_eff, u_eff_max, SectorParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// ------------------------------------------------------------------ harness

enum Verdict {
    Pass,
    Fail,
    /// Soft thresholds missed; reported but not fatal.
    SoftFail,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn hard(pass: bool, detail: String) -> Self {
        Self { verdict: if pass { Verdict::Pass } else { Verdict::Fail }, detail }
    }
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        ("c01", "flow benchmark", c01_flow),
        ("c02", "scalar balance", c02_balance),
        ("c03", "gradient suite", c03_gradients),
        ("c04", "shaping telescoping", c04_telescoping),
        ("c05", "segment sampler", c05_sampler),
        ("c06", "sector model", c06_sector),
        ("c07", "fingerprint oracle", c07_fingerprint),
        ("c08", "power-law collapse", c08_collapse),
        ("c09", "training smoke test", c09_training),
        ("c10", "reproducibility", c10_reproducibility),
    ];
    let mut hard_failures = 0;
    for (id, title, run) in criteria {
        let label = format!("{id} {title}");
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::hard(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let tag = match out.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                hard_failures += 1;
                "FAIL"
            }
            Verdict::SoftFail => "SOFT-FAIL",
        };
        println!("acceptance {label}: {tag} ({:.1}s) {}", start.elapsed().as_secs_f64(), out.detail);
    }
    if hard_failures > 0 {
        println!("acceptance: {hard_failures} criterion(s) failed");
        std::process::exit(1);
    }
}

// --------------------------------------------------------------- field bank

struct BankRun {
    bank: Vec<FieldSeries>,
    diag: RunDiagnostics,
    cfg: SimConfig,
    seconds: f64,
}

/// The default Re=100 run, shared by the flow, balance and training criteria.
fn default_bank() -> &'static BankRun {
    static BANK: OnceLock<BankRun> = OnceLock::new();
    BANK.get_or_init(|| {
        let cfg = SimConfig::default();
        let start = Instant::now();
        let out = run_bank(&cfg).expect("default flow run");
        BankRun { bank: out.series, diag: out.diagnostics, cfg, seconds: start.elapsed().as_secs_f64() }
    })
}

fn c01_flow() -> Outcome {
    let run = default_bank();
    let st = run.diag.strouhal().unwrap_or(f64::NAN);
    let div = run.diag.max_divergence;
    let ok_st = (0.155..=0.175).contains(&st);
    let ok_div = div <= DIVERGENCE_TOL;
    // one run covers the flow and all four sources
    let ok_time = run.seconds <= 15.0 * 60.0;
    Outcome::hard(
        ok_st && ok_div && ok_time,
        format!(
            "St={st:.4} (want [0.155, 0.175]), max div={div:.2e} (want <= 1e-6), runtime {:.0}s at {}x{} (want <= 900s)",
            run.seconds, run.cfg.nx, run.cfg.ny
        ),
    )
}

fn c02_balance() -> Outcome {
    let run = default_bank();
    let rate = run.cfg.emission_rate();
    let (mut before, mut after, mut n_before, mut n_after) = (0.0f64, 0.0f64, 0, 0);
    for k in 0..run.cfg.source_positions.len() {
        for r in run.diag.early_balance[k].iter().chain(&run.diag.balance[k]) {
            let err = (r.dmdt - r.expected).abs() / rate;
            if r.outflow == 0.0 {
                before = before.max(err);
                n_before += 1;
            } else {
                after = after.max(err);
                n_after += 1;
            }
        }
    }

    // still fluid: every step adds exactly rate * dt
    let (nx, ny, h, dt) = (60, 40, 0.05, 0.01);
    let src = SourceTerm::disk(nx, ny, h, [1.5, 1.0], 0.2, rate);
    let mut tr = ScalarTransport::new(nx, ny, h, 0.01);
    let (u, v) = (vec![0.0; (nx + 1) * ny], vec![0.0; nx * (ny + 1)]);
    let mut c = vec![0.0; nx * ny];
    let mut still: f64 = 0.0;
    let mut prev = 0.0;
    for _ in 0..50 {
        tr.advance(&mut c, &u, &v, &src, dt, 1);
        let m = total_mass(&c, h);
        still = still.max(((m - prev) - rate * dt).abs() / (rate * dt));
        prev = m;
    }

    Outcome::hard(
        n_before > 0 && n_after > 0 && before <= 1e-3 && after <= 0.02 && still <= 1e-12,
        format!(
            "max |dM/dt - (J pi delta^2 - outflow)| / J pi delta^2: {before:.2e} over {n_before} frames before breakthrough (want <= 1e-3), \
             {after:.2e} over {n_after} frames after (want <= 0.02); still fluid {still:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- gradients

const FD_H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

struct GradCase {
    net: Network,
    params: Vec<f64>,
    steps: usize,
    batch: usize,
    obs: Vec<f64>,
    actions: Option<Vec<f64>>,
    seed: Vec<f64>,
}

impl GradCase {
    fn new(spec: NetSpec, steps: usize, batch: usize, rng: &mut ChaCha8Rng) -> Self {
        let net = Network::new(spec).unwrap();
        let mut params = net.init_params(InitScheme::Normal, InitScheme::Orthogonal, rng);
        params.iter_mut().for_each(|p| *p += 0.2 * rng.gen_range(-1.0..1.0));
        let s = net.spec().clone();
        let rows = steps * batch;
        let obs = (0..rows * s.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let actions = (s.action_dim > 0).then(|| (0..rows * s.action_dim).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let seed = (0..rows * s.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { net, params, steps, batch, obs, actions, seed }
    }

    fn loss(&self, params: &[f64], actions: Option<&[f64]>) -> f64 {
        let input = SeqInput { steps: self.steps, batch: self.batch, obs: &self.obs, actions, active: None };
        let out = self.net.forward(params, &input, None).unwrap().output;
        out.iter().zip(&self.seed).map(|(o, s)| o * s).sum()
    }

    /// Worst relative error per parameter block, checking at most `per_block`
    /// entries of each block; the action inputs are reported as `actions`.
    fn check(&self, per_block: usize, rng: &mut ChaCha8Rng, worst: &mut BTreeMap<String, f64>) {
        let input =
            SeqInput { steps: self.steps, batch: self.batch, obs: &self.obs, actions: self.actions.as_deref(), active: None };
        let fwd = self.net.forward(&self.params, &input, None).unwrap();
        let g = self.net.backward(&self.params, &fwd, &self.seed, 0).unwrap();
        let mut p = self.params.clone();
        for block in self.net.blocks() {
            let range = block.range();
            let picks: Vec<usize> = if range.len() <= per_block {
                range.collect()
            } else {
                (0..per_block).map(|_| rng.gen_range(range.clone())).collect()
            };
            for k in picks {
                let p0 = p[k];
                p[k] = p0 + FD_H;
                let lp = self.loss(&p, self.actions.as_deref());
                p[k] = p0 - FD_H;
                let lm = self.loss(&p, self.actions.as_deref());
                p[k] = p0;
                let e = rel_err(g.params[k], (lp - lm) / (2.0 * FD_H));
                let w = worst.entry(block.name.clone()).or_insert(0.0);
                *w = w.max(e);
            }
        }
        if let Some(a) = &self.actions {
            let mut a = a.clone();
            for k in 0..a.len() {
                let a0 = a[k];
                a[k] = a0 + FD_H;
                let lp = self.loss(&self.params, Some(&a));
                a[k] = a0 - FD_H;
                let lm = self.loss(&self.params, Some(&a));
                a[k] = a0;
                let w = worst.entry("actions".into()).or_insert(0.0);
                *w = w.max(rel_err(g.actions[k], (lp - lm) / (2.0 * FD_H)));
            }
        }
    }
}

fn c03_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = BTreeMap::new();
    let small = |ln: bool, trunk: Vec<usize>, head: Vec<usize>, action_dim: usize| NetSpec {
        input_dim: 3,
        trunk,
        hidden: 4,
        head,
        action_dim,
        output_dim: 2,
        layer_norm: ln,
        leak: 0.01,
    };
    for spec in [
        small(true, vec![4, 3], vec![3], 1),
        small(false, vec![4], vec![4, 3], 1),
        small(true, vec![], vec![], 0),
        small(false, vec![3], vec![], 2),
    ] {
        GradCase::new(spec, 3, 2, &mut rng).check(usize::MAX, &mut rng, &mut worst);
    }
    let mut full = BTreeMap::new();
    for spec in [NetSpec::policy(OBS_DIM), NetSpec::critic(OBS_DIM)] {
        GradCase::new(spec, 3, 2, &mut rng).check(25, &mut rng, &mut full);
    }

    // three-step unroll with one burn-in step: the prefix state is held fixed
    let spec = NetSpec { input_dim: 2, trunk: vec![3], hidden: 4, head: vec![3], action_dim: 1, output_dim: 1, layer_norm: true, leak: 0.01 };
    let (steps, batch, burn) = (3, 2, 1);
    let case = GradCase::new(spec, steps, batch, &mut rng);
    let input = SeqInput { steps, batch, obs: &case.obs, actions: case.actions.as_deref(), active: None };
    let fwd = case.net.forward(&case.params, &input, None).unwrap();
    let g = case.net.backward(&case.params, &fwd, &case.seed, burn).unwrap();
    let split = burn * batch;
    let acts = case.actions.as_deref().unwrap();
    let prefix = SeqInput { steps: burn, batch, obs: &case.obs[..split * 2], actions: Some(&acts[..split]), active: None };
    let state = case.net.forward(&case.params, &prefix, None).unwrap().final_state;
    let suffix = |p: &[f64]| {
        let input = SeqInput { steps: steps - burn, batch, obs: &case.obs[split * 2..], actions: Some(&acts[split..]), active: None };
        let out = case.net.forward(p, &input, Some(&state)).unwrap().output;
        out.iter().zip(&case.seed[split..]).map(|(o, w)| o * w).sum::<f64>()
    };
    let mut p = case.params.clone();
    let mut unroll: f64 = 0.0;
    for k in 0..p.len() {
        let p0 = p[k];
        p[k] = p0 + FD_H;
        let lp = suffix(&p);
        p[k] = p0 - FD_H;
        let lm = suffix(&p);
        p[k] = p0;
        unroll = unroll.max(rel_err(g.params[k], (lp - lm) / (2.0 * FD_H)));
    }
    let burn_zero = g.actions[..split].iter().all(|&x| x == 0.0);
    let all = case.net.backward(&case.params, &fwd, &case.seed, steps).unwrap();
    let all_zero = all.params.iter().chain(&all.actions).all(|&x| x == 0.0);

    let blocks = worst.values().fold(0.0f64, |a, &b| a.max(b));
    let stacks = full.values().fold(0.0f64, |a, &b| a.max(b));
    let worst_name = worst.iter().chain(&full).max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k.clone()).unwrap_or_default();
    Outcome::hard(
        blocks < 1e-4 && stacks < 1e-4 && unroll < 1e-4 && burn_zero && all_zero,
        format!(
            "max rel error {blocks:.1e} over {} block kinds (full param sweep), {stacks:.1e} on full actor/critic stacks, \
             {unroll:.1e} on 3-step unroll with burn-in (want < 1e-4; worst block `{worst_name}`); burn-in grads exactly zero: {}",
            worst.len(),
            burn_zero && all_zero
        ),
    )
}

// ------------------------------------------------------------------ shaping

/// Coarse synthetic bank: uniform drift and a pulsing blob around each source.
fn blob_bank(n_frames: usize) -> Vec<FieldSeries> {
    let meta = FieldMeta { re: 100.0, sc: 0.1, j: 0.1, delta: 0.2 };
    odorlab::flowsim::default_sources()
        .into_iter()
        .map(|s| {
            FieldSeries::from_fn(41, 21, 0.5, [0.0, 0.0], n_frames, 0.1, s, meta, |t, x, y| {
                let r2 = (x - s[0]).powi(2) + (y - s[1]).powi(2);
                (0.3, 0.2 * (0.5 * t).sin(), (-r2 / 20.0).exp() * (1.0 + 0.3 * (t + x).sin()))
            })
            .unwrap()
        })
        .collect()
}

fn c04_telescoping() -> Outcome {
    let bank = blob_bank(601);
    let cfg = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_sum, mut worst_reward, mut lengths) = (0.0f64, 0.0f64, Vec::new());
    for _ in 0..100 {
        let n = rng.gen_range(0..cfg.n_total);
        let mut env = Env::reset(&cfg, &bank, n, &mut rng).unwrap();
        let target = env.target();
        let x0 = env.state().x;
        let (mut sum, mut disc, mut x) = (0.0, 1.0, x0);
        let mut steps = 0;
        loop {
            let grad_c = env.sample().grad_c;
            let out = env.step(rng.gen_range(-0.6..0.6)).unwrap();
            let x_new = env.state().x;
            let f = shaping(x, x_new, target, &cfg);
            sum += disc * f;
            disc *= cfg.gamma_d;
            // the reward is base + annealed shaping + terminal bonus
            let terminal = match out.termination {
                Termination::Arrived => cfg.arrival_reward,
                Termination::Boundary => cfg.boundary_penalty,
                Termination::Timeout => cfg.timeout_penalty,
                Termination::Running => 0.0,
            };
            let expect = base_reward(x, x_new, grad_c, &cfg) + anneal(n, &cfg) * f + terminal;
            worst_reward = worst_reward.max((out.reward - expect).abs());
            x = x_new;
            steps += 1;
            if out.termination.is_done() {
                break;
            }
        }
        let closed = disc * potential(x, target, &cfg) - potential(x0, target, &cfg);
        worst_sum = worst_sum.max((sum - closed).abs());
        lengths.push(steps);
    }
    lengths.sort_unstable();
    Outcome::hard(
        worst_sum <= 1e-10 && worst_reward <= 1e-9,
        format!(
            "max |sum gamma^t F_t - (gamma^T Phi_T - Phi_0)| = {worst_sum:.1e} over 100 episodes of {}..{} steps (want <= 1e-10); \
             reward decomposition residual {worst_reward:.1e}",
            lengths[0],
            lengths[lengths.len() - 1]
        ),
    )
}

// ------------------------------------------------------------------ sampler

fn c05_sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (window, burn) = (10, 10);
    let mut store = ReplayStore::new(1_000_000);
    let mut lengths = Vec::new();
    for e in 0..40 {
        // sentinels: obs carries (episode, step), next_obs (episode, step + 1)
        let len = if e % 4 == 0 { rng.gen_range(1..20) } else { rng.gen_range(20..80) };
        let steps = (0..len)
            .map(|i| {
                let mut obs = [0.0; OBS_DIM];
                obs[0] = e as f64;
                obs[1] = i as f64;
                let mut next = obs;
                next[1] += 1.0;
                let done = if i + 1 == len { Termination::Boundary } else { Termination::Running };
                StepRecord { obs, action: e as f64 + i as f64 / 1000.0, reward: 0.0, done, next_obs: next }
            })
            .collect();
        store.push_episode(steps, e).unwrap();
        lengths.push(len);
    }

    let (draws, per_call) = (100_000, 1000);
    let mut counts = vec![0usize; store.len()];
    let mut crossings = 0;
    let mut rule_breaks = 0;
    for _ in 0..draws / per_call {
        let sb = sample_segments(&store, &mut rng, window, burn, per_call).unwrap();
        let t = BatchTensors::build(&store, &sb);
        for (b, seg) in sb.segments.iter().enumerate() {
            counts[seg.episode] += 1;
            let len = lengths[seg.episode];
            let ok = if len >= burn + window {
                seg.burn_in == burn && seg.train_len == window && seg.start + burn + window <= len
            } else {
                seg.start == 0 && seg.burn_in == burn.min(len.saturating_sub(1)) && seg.train_len == len - seg.burn_in
            };
            rule_breaks += usize::from(!ok);
            // every real column must carry this episode's consecutive steps
            let pad = burn - seg.burn_in;
            let total = seg.burn_in + seg.train_len + 1;
            for k in 0..total {
                let r = (pad + k) * t.batch + b;
                let o = &t.obs[r * OBS_DIM..(r + 1) * OBS_DIM];
                if o[0] != seg.episode as f64 || o[1] != (seg.start + k) as f64 {
                    crossings += 1;
                }
            }
            for k in 0..window {
                let m = t.mask[k * t.batch + b];
                if (m > 0.0) != (k < seg.train_len) {
                    crossings += 1;
                }
            }
        }
    }

    let k = counts.len() as f64;
    let expect = draws as f64 / k;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let dof = k - 1.0;
    let z = (chi2 - dof) / (2.0 * dof).sqrt();
    let worst_z = counts
        .iter()
        .map(|&c| (c as f64 - expect).abs() / (expect * (1.0 - 1.0 / k)).sqrt())
        .fold(0.0f64, f64::max);

    // worked example: one episode of 5 steps, W = B = 10
    let mut one = ReplayStore::new(100);
    let tiny: Vec<StepRecord> = (0..5)
        .map(|i| StepRecord {
            obs: [i as f64; OBS_DIM],
            action: 0.0,
            reward: 0.0,
            done: if i == 4 { Termination::Timeout } else { Termination::Running },
            next_obs: [i as f64 + 1.0; OBS_DIM],
        })
        .collect();
    one.push_episode(tiny, 0).unwrap();
    let s = sample_segments(&one, &mut rng, 10, 10, 1).unwrap().segments[0];
    let example = (s.start, s.burn_in, s.train_len) == (0, 4, 1);

    Outcome::hard(
        crossings == 0 && rule_breaks == 0 && z.abs() <= 3.0 && example,
        format!(
            "{draws} draws: {crossings} boundary crossings, {rule_breaks} slicing-rule breaks; episode choice chi2={chi2:.1} on {dof} dof \
             (z={z:.2}, want |z| <= 3; worst single-episode z={worst_z:.2}); L=5,W=B=10 gives burn-in {} train {}",
            s.burn_in, s.train_len
        ),
    )
}

// ------------------------------------------------------------------- sector

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while (b - a).abs() > tol {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

fn c06_sector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut argmax_err: f64 = 0.0;
    for _ in 0..50 {
        let p = SectorParams {
            a: rng.gen_range(0.1..3.0),
            l: rng.gen_range(0.1..3.0),
            gamma_s: rng.gen_range(1.0..2.0),
            f: rng.gen_range(1.0..20.0),
            n: rng.gen_range(1.0..12.0),
        };
        let lo = p.n / p.f;
        let t = golden_max(|t| u_eff(t, &p).unwrap(), lo, 20.0 * lo, 1e-12);
        let want = E.powf(1.0 / p.gamma_s) * p.n / p.f;
        argmax_err = argmax_err.max((t - want).abs());
    }
    let paper = SectorParams { a: 1.0, l: 1.0, gamma_s: 2.0, f: 10.0, n: 6.0 };
    let (t_star, _) = u_eff_max(&paper).unwrap();
    let tf = t_star * paper.f;

    let mut identity: f64 = 0.0;
    for _ in 0..1000 {
        let p = SectorParams {
            a: rng.gen_range(0.05..5.0),
            l: rng.gen_range(0.05..5.0),
            gamma_s: rng.gen_range(0.5..3.0),
            f: rng.gen_range(0.5..30.0),
            n: rng.gen_range(1.0..20.0),
        };
        let t = p.n / p.f * rng.gen_range(1.0..30.0);
        let (_, u_star) = u_eff_max(&p).unwrap();
        let lhs = u_eff(t, &p).unwrap() / u_star;
        identity = identity.max((lhs - normalized_u_eff(t, p.gamma_s, p.n, p.f)).abs());
    }

    let pts: Vec<(f64, f64)> = (1..=40).map(|k| {
        let x = 0.5 * k as f64;
        (x, normalized_u_eff(x / 10.0, 2.0, 6.0, 10.0))
    }).collect();
    let fit = sector::fit(&pts, &[1.0, 2.0]).unwrap();

    let pass = argmax_err <= 1e-6
        && (tf - 9.89233).abs() < 5e-6
        && (tf - 9.89).abs() < 0.005
        && identity <= 1e-12
        && (fit.n - 6.0).abs() < 1e-6
        && fit.gamma == 2.0
        && fit.residual < 1e-10;
    Outcome::hard(
        pass,
        format!(
            "argmax error {argmax_err:.1e} over 50 draws (want <= 1e-6); T_M* f = {tf:.5} (paper 9.89); identity error {identity:.1e} \
             over 1000 draws (want <= 1e-12); fit N={:.6} gamma={} residual={:.1e}",
            fit.n, fit.gamma, fit.residual
        ),
    )
}

// -------------------------------------------------------------- fingerprint

/// Trajectories with planted turning modes, switching concentration and
/// flow-velocity slope.
fn planted(seed: u64, trials: usize, len: usize, dt1: f64, dt2: f64, c_c: f64, k: f64) -> Vec<TrialRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(dt1, 3.0).unwrap();
    let large = Normal::new(dt2, 5.0).unwrap();
    let surge = Normal::new(5.0, 2.0).unwrap();
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let u_a = 3.0;
    (0..trials)
        .map(|id| {
            let theta0: f64 = rng.gen_range(-PI..PI);
            let mut heading = theta0;
            let steps = (0..len)
                .map(|_| {
                    let c = 10f64.powf(rng.gen_range(-4.0..0.0));
                    let turn: f64 = if c < c_c {
                        if rng.gen::<bool>() { small.sample(&mut rng) } else { large.sample(&mut rng) }
                    } else {
                        surge.sample(&mut rng)
                    };
                    let turn = turn.abs().min(180.0).to_radians() * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    heading = wrap_angle(heading + turn);
                    let u_fy = (u_a * heading.sin() + jitter.sample(&mut rng)) / k;
                    StepLog { x: [10.0, 5.0], heading, c, grad_c: [0.0, 0.0], u_f: [0.0, u_fy], delta_theta: turn }
                })
                .collect();
            TrialRecord {
                trial_id: id as u64,
                source_index: 0,
                source: [4.0, 4.5],
                start: [16.0, 5.0],
                t0: 0.0,
                theta0,
                u_a,
                termination: Termination::Timeout,
                arrival_time: None,
                steps,
            }
        })
        .collect()
}

fn c07_fingerprint() -> Outcome {
    let records = planted(707, 50, 1000, 9.0, 135.0, 0.064, 1.86);
    match extract_fingerprint(&records, &FingerprintConfig::default()) {
        Ok(fp) => {
            let pass = (fp.delta_theta_1 - 9.0).abs() <= 2.0
                && (fp.delta_theta_2 - 135.0).abs() <= 5.0
                && (fp.c_c / 0.064 - 1.0).abs() <= 0.2
                && (fp.k - 1.86).abs() <= 0.05;
            Outcome::hard(
                pass,
                format!(
                    "recovered dtheta1={:.2} (9 +-2), dtheta2={:.2} (135 +-5), c_c={:.4} (0.064 +-20%), k={:.3} (1.86 +-0.05)",
                    fp.delta_theta_1, fp.delta_theta_2, fp.c_c, fp.k
                ),
            )
        }
        Err(e) => Outcome::hard(false, format!("extraction failed: {e}")),
    }
}

// ----------------------------------------------------------------- collapse

fn c08_collapse() -> Outcome {
    let base = |x: f64| x * (-x / 8.0).exp() + 0.1;
    let curve = |re: f64, p: f64| Condition {
        points: (1..=30).map(|k| {
            let x = k as f64;
            (x, base(x) * re.powf(p))
        }).collect(),
        covariates: [re, 0.1, 3.0, 0.6],
    };
    let half = collapse_fit(&[curve(100.0, 0.5), curve(400.0, 0.5)]).unwrap();
    let tiny = collapse_fit(&[curve(100.0, 0.01), curve(400.0, 0.01)]).unwrap();
    let pass = (half.exponents[0] - 0.5).abs() <= 1e-3
        && half.exponents[1..].iter().all(|&e| e == 0.0)
        && tiny.exponents.iter().all(|&e| e == 0.0);
    Outcome::hard(
        pass,
        format!(
            "planted 0.5 -> {:.6} (want +-1e-3); planted 0.01 -> {:?} (cutoff {EXPONENT_CUTOFF})",
            half.exponents[0], tiny.exponents
        ),
    )
}

// ----------------------------------------------------------------- training

struct LogRows(Vec<EpisodeLog>);

impl TrainObserver for LogRows {
    fn episode(&mut self, log: &EpisodeLog) -> odorlab::Result<()> {
        self.0.push(log.clone());
        Ok(())
    }
}

struct TrainedRun {
    logs: Vec<EpisodeLog>,
    params: Vec<f64>,
    seconds: f64,
    nan: bool,
}

fn train_run(bank: &[FieldSeries], env: &EnvConfig, cfg: &TrainConfig) -> odorlab::Result<TrainedRun> {
    let agent = Agent::standard();
    let mut state = TrainState::new(&agent, cfg);
    let mut rows = LogRows(Vec::new());
    let start = Instant::now();
    let res = train(&agent, &mut state, cfg, env, bank, &mut rows);
    let seconds = start.elapsed().as_secs_f64();
    let nan_params = [&state.actor, &state.critic1, &state.critic2].iter().any(|p| p.iter().any(|x| !x.is_finite()));
    let nan_logs = rows.0.iter().any(|l| !(l.ret.is_finite() && l.critic_loss.is_finite() && l.actor_loss.is_finite() && l.xi.is_finite()));
    let nan = nan_params || nan_logs || matches!(res, Err(odorlab::Error::Training { .. }));
    if let Err(e) = res {
        if !nan {
            return Err(e);
        }
    }
    Ok(TrainedRun { logs: rows.0, params: state.actor, seconds, nan })
}

fn curve(logs: &[EpisodeLog], blocks: usize) -> String {
    let per = logs.len().div_ceil(blocks).max(1);
    logs.chunks(per)
        .map(|c| format!("{:.0}%", 100.0 * c.iter().filter(|l| l.success).count() as f64 / c.len() as f64))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_log(path: &PathBuf, logs: &[EpisodeLog]) {
    let mut text = format!("{}\n", EpisodeLog::CSV_HEADER);
    for l in logs {
        text += &l.csv_row();
        text.push('\n');
    }
    std::fs::write(path, text).expect("write training curve");
}

fn c09_training() -> Outcome {
    let full = std::env::var("ODORLAB_FULL_TRAINING").is_ok_and(|v| v == "1");
    let episodes = if full { 2000 } else { 150 };
    let bank = &default_bank().bank;
    let env = EnvConfig { n_total: episodes, ..EnvConfig::default() };
    let eval = EvalConfig { n_trials: 200, seed: 9 };
    let agent = Agent::standard();
    let dir = artifacts();
    let mut parts = Vec::new();
    let mut success = BTreeMap::new();
    let mut hard_ok = true;
    for w in [10usize, 2] {
        let cfg = TrainConfig { window_steps: Some(w), seed: 9, ..TrainConfig::default() };
        let run = match train_run(bank, &env, &cfg) {
            Ok(r) => r,
            Err(e) => return Outcome::hard(false, format!("training with T_M f={w} failed: {e}")),
        };
        let path = dir.join(format!("c09_tm{w}_log.csv"));
        write_log(&path, &run.logs);
        let policy = NetPolicy::new(&agent.actor, &run.params).unwrap();
        let records = evaluate(&policy, &env, bank, &eval, 1).unwrap();
        let s = summarize(&records);
        success.insert(w, s.success_rate);
        let in_time = run.seconds <= 4.0 * 3600.0;
        hard_ok &= !run.nan && run.logs.len() == episodes && in_time;
        parts.push(format!(
            "T_M f={w}: {} episodes in {:.0}s, NaN={}, eval success {:.1}% (U_eff {:.3}), training success by decile [{}], curve {}",
            run.logs.len(),
            run.seconds,
            run.nan,
            100.0 * s.success_rate,
            s.mean_u_eff,
            curve(&run.logs, 10),
            path.display()
        ));
    }
    let (s10, s2) = (success[&10], success[&2]);
    let soft_ok = s10 >= 0.6 && s10 - s2 >= 0.2;
    let mode = if full { "full length" } else { "reduced length; set ODORLAB_FULL_TRAINING=1 for 2000 episodes" };
    let detail = format!(
        "[{mode}] {} | soft: success(10)={:.1}% (want >= 60%), success(10)-success(2)={:.1} points (want >= 20)",
        parts.join(" | "),
        100.0 * s10,
        100.0 * (s10 - s2)
    );
    let verdict = match (hard_ok, soft_ok) {
        (false, _) => Verdict::Fail,
        (true, true) => Verdict::Pass,
        (true, false) => Verdict::SoftFail,
    };
    Outcome { verdict, detail }
}

// ---------------------------------------------------------- reproducibility

fn small_sim() -> SimConfig {
    SimConfig {
        nx: 40,
        ny: 20,
        dt_solver: 0.05,
        t_total: 75.0,
        t_record_start: 10.0,
        frame_interval: 0.5,
        export_nx: 40,
        export_ny: 20,
        export_dx: 0.5,
        ..SimConfig::default()
    }
}

fn field_bytes(bank: &[FieldSeries]) -> Vec<Vec<u8>> {
    bank.iter()
        .map(|s| {
            let mut b = Vec::new();
            fieldstore::save(s, &mut b).unwrap();
            b
        })
        .collect()
}

fn c10_reproducibility() -> Outcome {
    let sim = small_sim();
    let a = run_bank(&sim).unwrap().series;
    let b = run_bank(&sim).unwrap().series;
    let fields_same = field_bytes(&a) == field_bytes(&b);

    let env = EnvConfig { n_total: 16, n_e: 4, ..EnvConfig::default() };
    let cfg = TrainConfig {
        window_steps: Some(4),
        burn_in: 2,
        batch: 6,
        update_start: 40,
        update_every: 10,
        zero_wall_time: true,
        seed: 10,
        ..TrainConfig::default()
    };
    let csv = |logs: &[EpisodeLog]| logs.iter().map(EpisodeLog::csv_row).collect::<Vec<_>>().join("\n");
    let r1 = train_run(&a, &env, &cfg).unwrap();
    let r2 = train_run(&a, &env, &cfg).unwrap();
    let logs_same = csv(&r1.logs) == csv(&r2.logs) && r1.params == r2.params;

    let agent = Agent::standard();
    let policy = NetPolicy::new(&agent.actor, &r1.params).unwrap();
    let eval = EvalConfig { n_trials: 24, seed: 10 };
    let table = |jobs: usize| {
        let recs = evaluate(&policy, &env, &a, &eval, jobs).unwrap();
        let mut out = Vec::new();
        write_trials_csv(&recs, None, &mut out).unwrap();
        out
    };
    let t1 = table(1);
    let trials_same = t1 == table(1);
    let jobs_same = t1 == table(3);

    Outcome::hard(
        fields_same && logs_same && trials_same && jobs_same,
        format!(
            "identical field files: {fields_same}, training logs and weights: {logs_same}, trial CSVs: {trials_same} \
             (and across 1 vs 3 jobs: {jobs_same})"
        ),
    )
}
