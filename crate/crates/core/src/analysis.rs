//! Evaluation campaigns and the strategy statistics computed from them:
//! success rate, effective speed, joint PDFs, the strategy fingerprint and
//! the power-law collapse of curves measured under different conditions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::env::{curriculum_region, turning_angle, wrap_angle, Env, EnvConfig, Termination};
use crate::fieldstore::FieldSeries;
use crate::nnet::{policy_forward, sample_action, Network, RecurrentState};
use crate::optim::nelder_mead;
use crate::{Error, Result, Vec2};

/// Decision rule driving an evaluation trial.
pub trait Policy: Clone + Send {
    /// Clears any per-trial state.
    fn begin(&mut self);
    fn act(&mut self, env: &Env<'_>, rng: &mut ChaCha8Rng) -> Result<f64>;
}

/// Frozen recurrent policy with stochastic actions.
#[derive(Debug, Clone)]
pub struct NetPolicy<'a> {
    net: &'a Network,
    params: &'a [f64],
    state: RecurrentState,
}

impl<'a> NetPolicy<'a> {
    pub fn new(net: &'a Network, params: &'a [f64]) -> Result<Self> {
        if params.len() != net.n_params() {
            return Err(Error::Usage(format!("policy needs {} parameters, got {}", net.n_params(), params.len())));
        }
        Ok(Self { net, params, state: RecurrentState::zeros(1, net.hidden()) })
    }
}

impl Policy for NetPolicy<'_> {
    fn begin(&mut self) {
        self.state = RecurrentState::zeros(1, self.net.hidden());
    }

    fn act(&mut self, env: &Env<'_>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (head, next) = policy_forward(self.net, self.params, &env.observation(), &self.state)?;
        self.state = next;
        Ok(sample_action(&head, rng).0)
    }
}

/// Cheats by reading the true source position and heads straight for it.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn begin(&mut self) {}

    fn act(&mut self, env: &Env<'_>, _rng: &mut ChaCha8Rng) -> Result<f64> {
        let s = env.state();
        let t = env.target();
        let want = (t[1] - s.x[1]).atan2(t[0] - s.x[0]);
        Ok(wrap_angle(want - s.theta))
    }
}

/// Turns by an angle drawn uniformly from (-pi, pi] at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn begin(&mut self) {}

    fn act(&mut self, _env: &Env<'_>, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(PI - 2.0 * PI * rng.gen::<f64>())
    }
}

/// One decision step of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Position before the step.
    pub x: Vec2,
    /// Heading used for this step's motion, after the turn.
    pub heading: f64,
    /// Percept at the pre-step position, seen before choosing the turn.
    pub c: f64,
    pub grad_c: Vec2,
    pub u_f: Vec2,
    pub delta_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub source_index: usize,
    pub source: Vec2,
    pub start: Vec2,
    pub t0: f64,
    /// Heading at reset.
    pub theta0: f64,
    pub u_a: f64,
    pub termination: Termination,
    pub arrival_time: Option<f64>,
    pub steps: Vec<StepLog>,
}

impl TrialRecord {
    pub fn success(&self) -> bool {
        self.termination == Termination::Arrived
    }

    pub fn initial_distance(&self) -> f64 {
        ((self.start[0] - self.source[0]).powi(2) + (self.start[1] - self.source[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_trials: 1000, seed: 0 }
    }
}

/// RNG of trial `id`: the root seed selects the key, the trial id the stream.
pub fn trial_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Runs one trial from the final (largest) start region.
pub fn run_trial<P: Policy>(policy: &mut P, cfg: &EnvConfig, bank: &[FieldSeries], id: u64, seed: u64) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, id);
    let n = cfg.n_total;
    let mut env = Env::reset_in(cfg, bank, n, curriculum_region(n, cfg), &mut rng)?;
    policy.begin();
    let theta0 = env.state().theta;
    let mut steps = Vec::with_capacity(cfg.max_steps());
    loop {
        let before = *env.sample();
        let x = env.state().x;
        let a = policy.act(&env, &mut rng)?;
        let out = env.step(a)?;
        steps.push(StepLog { x, heading: env.state().theta, c: before.c, grad_c: before.grad_c, u_f: before.u_f, delta_theta: a });
        if out.termination.is_done() {
            break;
        }
    }
    let termination = env.termination();
    let arrival_time = (termination == Termination::Arrived).then(|| env.state().t - env.start_time());
    Ok(TrialRecord {
        trial_id: id,
        source_index: env.source_index(),
        source: env.target(),
        start: env.start_position(),
        t0: env.start_time(),
        theta0,
        u_a: cfg.u_a,
        termination,
        arrival_time,
        steps,
    })
}

/// Runs `n_trials` independent trials, spread over `jobs` threads. The
/// result does not depend on `jobs`.
pub fn evaluate<P: Policy>(policy: &P, cfg: &EnvConfig, bank: &[FieldSeries], eval: &EvalConfig, jobs: usize) -> Result<Vec<TrialRecord>> {
    let n = eval.n_trials as u64;
    let jobs = jobs.max(1).min(eval.n_trials.max(1)) as u64;
    if jobs == 1 {
        let mut p = policy.clone();
        return (0..n).map(|id| run_trial(&mut p, cfg, bank, id, eval.seed)).collect();
    }
    let chunks: Vec<Result<Vec<TrialRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let mut p = policy.clone();
                scope.spawn(move || {
                    (n * j / jobs..n * (j + 1) / jobs).map(|id| run_trial(&mut p, cfg, bank, id, eval.seed)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(eval.n_trials);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Initial distance over arrival time; zero for a failed trial.
pub fn effective_speed(r: &TrialRecord) -> f64 {
    match r.arrival_time {
        Some(t) if r.success() && t > 0.0 => r.initial_distance() / t,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n_trials: usize,
    pub success_rate: f64,
    /// Mean effective speed with failures counted as zero.
    pub mean_u_eff: f64,
}

pub fn summarize(records: &[TrialRecord]) -> Summary {
    let n = records.len();
    if n == 0 {
        return Summary { n_trials: 0, success_rate: 0.0, mean_u_eff: 0.0 };
    }
    let wins = records.iter().filter(|r| r.success()).count();
    let speed: f64 = records.iter().map(effective_speed).sum();
    Summary { n_trials: n, success_rate: wins as f64 / n as f64, mean_u_eff: speed / n as f64 }
}

// ---------------------------------------------------------------- joint PDFs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdfAxes {
    /// Turning angle in degrees against log10 of the concentration.
    TurnVsLogC,
    /// Crosswind self-propulsion `U_a sin(theta)` against crosswind flow.
    AgentVsFlowY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistSpec {
    pub x_bins: usize,
    pub x_range: [f64; 2],
    pub y_bins: usize,
    pub y_range: [f64; 2],
}

impl HistSpec {
    pub fn turn_vs_log_c() -> Self {
        Self { x_bins: 90, x_range: [0.0, 180.0], y_bins: 40, y_range: [-6.0, 0.0] }
    }

    pub fn agent_vs_flow_y() -> Self {
        Self { x_bins: 60, x_range: [-3.0, 3.0], y_bins: 60, y_range: [-1.5, 1.5] }
    }
}

/// Concentrations below this are clamped before taking logarithms.
pub const C_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointPdf {
    pub axes: PdfAxes,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Probability mass per bin, `mass[ix * y_bins + iy]`; sums to one.
    pub mass: Vec<f64>,
}

impl JointPdf {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_lo,x_hi,y_lo,y_hi,mass\n");
        let ny = self.y_edges.len() - 1;
        for ix in 0..self.x_edges.len() - 1 {
            for iy in 0..ny {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    self.x_edges[ix],
                    self.x_edges[ix + 1],
                    self.y_edges[iy],
                    self.y_edges[iy + 1],
                    self.mass[ix * ny + iy]
                );
            }
        }
        s
    }
}

/// Turning angle (degrees) paired with the concentration seen before the
/// turn, for every step of every trial.
pub fn turning_samples(records: &[TrialRecord]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in records {
        let mut prev = r.theta0;
        for s in &r.steps {
            let a = [prev.cos(), prev.sin()];
            let b = [s.heading.cos(), s.heading.sin()];
            let d = turning_angle(a, b).expect("unit vectors are nonzero");
            out.push((d.to_degrees(), s.c));
            prev = s.heading;
        }
    }
    out
}

/// `(U_a^y, U_f^y)` for every step of every trial.
pub fn velocity_samples(records: &[TrialRecord]) -> Vec<(f64, f64)> {
    records.iter().flat_map(|r| r.steps.iter().map(move |s| (r.u_a * s.heading.sin(), s.u_f[1]))).collect()
}

fn edges(n: usize, [lo, hi]: [f64; 2]) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn bin_of(v: f64, n: usize, [lo, hi]: [f64; 2]) -> usize {
    let k = ((v - lo) / (hi - lo) * n as f64).floor();
    (k.max(0.0) as usize).min(n - 1)
}

/// Normalised 2D histogram of paired samples. Samples outside the axis
/// ranges are counted in the edge bins.
pub fn histogram2d(samples: &[(f64, f64)], spec: &HistSpec) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    for (name, n, [lo, hi]) in [("x", spec.x_bins, spec.x_range), ("y", spec.y_bins, spec.y_range)] {
        if n == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Usage(format!("empty {name} axis: {n} bins over [{lo}, {hi}]")));
        }
    }
    if samples.is_empty() {
        return Err(Error::Usage("no samples for the joint PDF".into()));
    }
    let mut counts = vec![0u64; spec.x_bins * spec.y_bins];
    for &(x, y) in samples {
        if x.is_nan() || y.is_nan() {
            return Err(Error::Usage("NaN sample in joint PDF input".into()));
        }
        counts[bin_of(x, spec.x_bins, spec.x_range) * spec.y_bins + bin_of(y, spec.y_bins, spec.y_range)] += 1;
    }
    let total = samples.len() as f64;
    let mass = counts.iter().map(|&c| c as f64 / total).collect();
    Ok((edges(spec.x_bins, spec.x_range), edges(spec.y_bins, spec.y_range), mass))
}

/// Joint PDF pooled over all steps of all trials, each step weighted equally.
pub fn joint_pdf(records: &[TrialRecord], axes: PdfAxes, spec: &HistSpec) -> Result<JointPdf> {
    let samples: Vec<(f64, f64)> = match axes {
        PdfAxes::TurnVsLogC => turning_samples(records).into_iter().map(|(d, c)| (d, c.max(C_LOG_FLOOR).log10())).collect(),
        PdfAxes::AgentVsFlowY => velocity_samples(records),
    };
    let (x_edges, y_edges, mass) = histogram2d(&samples, spec)?;
    Ok(JointPdf { axes, x_edges, y_edges, mass })
}

// --------------------------------------------------------------- fingerprint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerprintConfig {
    pub angle_bin_deg: f64,
    pub peak_separation_deg: f64,
    /// Steps with c at or below this percentile form the low-c pool.
    pub pool_percentile: f64,
    pub c_bins: usize,
    pub c_range: [f64; 2],
    /// Bins of m(c) with fewer steps are ignored.
    pub min_bin_count: usize,
    /// Only steps with |U_f^y| at most this enter the slope fit.
    pub uf_limit: f64,
    /// Gaussian smoothing of the angle histogram, in bins.
    pub smoothing_bins: f64,
    /// A second peak must reach this fraction of the first.
    pub min_peak_ratio: f64,
    /// The antimode must be at most this fraction of the lower peak.
    pub max_valley_ratio: f64,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        Self {
            angle_bin_deg: 2.0,
            peak_separation_deg: 20.0,
            pool_percentile: 10.0,
            c_bins: 40,
            c_range: [1e-6, 1.0],
            min_bin_count: 20,
            uf_limit: 1.0,
            smoothing_bins: 1.0,
            min_peak_ratio: 0.1,
            max_valley_ratio: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    /// Small adjusting angle, degrees.
    pub delta_theta_1: f64,
    /// Large casting angle, degrees.
    pub delta_theta_2: f64,
    pub c_c: f64,
    pub k: f64,
    /// Antimode separating the two turning modes, degrees.
    pub theta_split: f64,
    /// Fraction of low-c steps turning by more than the split.
    pub plateau: f64,
}

/// Linear-interpolated percentile (0..=100) of unsorted data.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}

fn smooth(h: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return h.to_vec();
    }
    let n = h.len() as isize;
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    // mirror at both ends of [0, 180]
    let at = |i: isize| {
        let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - i - 1 } else { i };
        h[j.clamp(0, n - 1) as usize]
    };
    (0..n)
        .map(|i| {
            let (mut s, mut w) = (0.0, 0.0);
            for (k, &kv) in kernel.iter().enumerate() {
                s += kv * at(i + k as isize - r);
                w += kv;
            }
            s / w
        })
        .collect()
}

/// Total-least-squares slope of `y` against `x`.
pub fn tls_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxy.abs() <= 1e-300 {
        return if sxx > syy { Some(0.0) } else { None };
    }
    let d = syy - sxx;
    Some((d + (d * d + 4.0 * sxy * sxy).sqrt()) / (2.0 * sxy))
}

/// Extracts (Δθ₁, Δθ₂, c_c, k) from trial step logs.
pub fn extract_fingerprint(records: &[TrialRecord], cfg: &FingerprintConfig) -> Result<Fingerprint> {
    let turns = turning_samples(records);
    if turns.is_empty() {
        return Err(Error::FingerprintUndefined { reason: "no steps".into(), histogram: vec![] });
    }
    // low-concentration pool and its turning-angle histogram
    let cs: Vec<f64> = turns.iter().map(|t| t.1).collect();
    let c_pool = percentile(&cs, cfg.pool_percentile);
    let pool: Vec<f64> = turns.iter().filter(|t| t.1 <= c_pool).map(|t| t.0).collect();
    let nb = (180.0 / cfg.angle_bin_deg).round().max(1.0) as usize;
    let w = 180.0 / nb as f64;
    let mut hist = vec![0.0; nb];
    for &d in &pool {
        hist[((d / w) as usize).min(nb - 1)] += 1.0 / pool.len() as f64;
    }
    let undefined = |reason: &str| Error::FingerprintUndefined { reason: reason.into(), histogram: hist.clone() };
    let s = smooth(&hist, cfg.smoothing_bins);
    let get = |i: isize| if i < 0 || i >= nb as isize { f64::NEG_INFINITY } else { s[i as usize] };
    let mut peaks: Vec<usize> = (0..nb)
        .filter(|&i| {
            let i = i as isize;
            s[i as usize] > 0.0 && s[i as usize] > get(i - 1) && s[i as usize] >= get(i + 1)
        })
        .collect();
    peaks.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let p1 = *peaks.first().ok_or_else(|| undefined("empty angle histogram"))?;
    let sep = (cfg.peak_separation_deg / w).round() as usize;
    let p2 = peaks
        .iter()
        .copied()
        .find(|&p| p.abs_diff(p1) >= sep && s[p] >= cfg.min_peak_ratio * s[p1])
        .ok_or_else(|| undefined("turning-angle histogram is unimodal"))?;
    let (lo, hi) = (p1.min(p2), p1.max(p2));
    let valley = (lo..=hi).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
    if s[valley] > cfg.max_valley_ratio * s[p1].min(s[p2]) {
        return Err(undefined("no antimode between the turning-angle peaks"));
    }
    let refine = |i: usize| {
        let (a, b, c) = (get(i as isize - 1), s[i], get(i as isize + 1));
        let off = if a.is_finite() && c.is_finite() && a - 2.0 * b + c < 0.0 { 0.5 * (a - c) / (a - 2.0 * b + c) } else { 0.0 };
        (i as f64 + 0.5 + off) * w
    };
    let (dt1, dt2) = (refine(lo), refine(hi));
    let split = (valley as f64 + 0.5) * w;

    // m(c) on log bins and its half-plateau crossing
    let plateau = pool.iter().filter(|&&d| d > split).count() as f64 / pool.len() as f64;
    if plateau <= 0.0 {
        return Err(undefined("no large turns at low concentration"));
    }
    let [c_lo, c_hi] = cfg.c_range;
    let (l_lo, l_hi) = (c_lo.log10(), c_hi.log10());
    let mut tot = vec![0usize; cfg.c_bins];
    let mut big = vec![0usize; cfg.c_bins];
    for &(d, c) in &turns {
        let b = bin_of(c.max(C_LOG_FLOOR).log10(), cfg.c_bins, [l_lo, l_hi]);
        tot[b] += 1;
        if d > split {
            big[b] += 1;
        }
    }
    let centre = |b: usize| l_lo + (b as f64 + 0.5) * (l_hi - l_lo) / cfg.c_bins as f64;
    let valid: Vec<(f64, f64)> = (0..cfg.c_bins)
        .filter(|&b| tot[b] >= cfg.min_bin_count)
        .map(|b| (centre(b), big[b] as f64 / tot[b] as f64))
        .collect();
    let half = 0.5 * plateau;
    // scanning down from high c, the first bin where m reaches half the plateau
    let k = (0..valid.len()).rev().find(|&i| valid[i].1 >= half).ok_or_else(|| undefined("m(c) never reaches half its plateau"))?;
    if k + 1 >= valid.len() {
        return Err(undefined("m(c) does not fall below half its plateau"));
    }
    let (x0, m0) = valid[k];
    let (x1, m1) = valid[k + 1];
    let log_cc = x0 + (x1 - x0) * (m0 - half) / (m0 - m1);
    let c_c = 10f64.powf(log_cc);

    let vel: Vec<(f64, f64)> =
        velocity_samples(records).into_iter().filter(|v| v.1.abs() <= cfg.uf_limit).map(|(a, f)| (f, a)).collect();
    let k = tls_slope(&vel).ok_or_else(|| undefined("crosswind velocities are degenerate"))?;
    Ok(Fingerprint { delta_theta_1: dt1, delta_theta_2: dt2, c_c, k, theta_split: split, plateau })
}

// ------------------------------------------------------------------ collapse

/// One measured curve and the conditions it was measured under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// `(T_M f, value)` pairs, increasing in `T_M f`.
    pub points: Vec<(f64, f64)>,
    /// `(Re, Sc, U_a/U_inf, St_f)`.
    pub covariates: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapseFit {
    /// Exponents of `(Re, Sc, U_a/U_inf, St_f)`.
    pub exponents: [f64; 4],
    pub residual: f64,
}

/// Exponents below this magnitude are dropped.
pub const EXPONENT_CUTOFF: f64 = 0.02;
const RESTARTS: usize = 20;
const NM_TOL: f64 = 1e-8;

fn interp(points: &[(f64, f64)], x: f64) -> f64 {
    let i = points.partition_point(|p| p.0 < x);
    if i == 0 {
        return points[0].1;
    }
    if i == points.len() {
        return points[i - 1].1;
    }
    let (a, b) = (points[i - 1], points[i]);
    if b.0 == a.0 {
        return b.1;
    }
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

/// Values of every condition on a shared `T_M f` grid, one row per grid
/// point.
fn common_grid(conds: &[Condition]) -> Result<Vec<Vec<f64>>> {
    let shared = conds.iter().all(|c| c.points.iter().map(|p| p.0).eq(conds[0].points.iter().map(|p| p.0)));
    let grid: Vec<f64> = if shared {
        conds[0].points.iter().map(|p| p.0).collect()
    } else {
        let lo = conds.iter().map(|c| c.points[0].0).fold(f64::NEG_INFINITY, f64::max);
        let hi = conds.iter().map(|c| c.points[c.points.len() - 1].0).fold(f64::INFINITY, f64::min);
        conds[0].points.iter().map(|p| p.0).filter(|&x| x >= lo && x <= hi).collect()
    };
    if grid.is_empty() {
        return Err(Error::Usage("curves share no T_M f range".into()));
    }
    Ok(grid.iter().map(|&x| conds.iter().map(|c| interp(&c.points, x)).collect()).collect())
}

/// Sum over grid points of the squared coefficient of variation across
/// conditions of the rescaled values.
fn spread(rows: &[Vec<f64>], logs: &[[f64; 4]], p: &[f64; 4]) -> f64 {
    let scale: Vec<f64> = logs.iter().map(|l| (-(0..4).map(|i| p[i] * l[i]).sum::<f64>()).exp()).collect();
    let mut total = 0.0;
    for row in rows {
        let n = row.len() as f64;
        let vals: Vec<f64> = row.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let mean = vals.iter().sum::<f64>() / n;
        if mean == 0.0 {
            continue;
        }
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        total += var / (mean * mean);
    }
    total
}

/// Finds power-law exponents of the covariates that best collapse the
/// curves onto one.
pub fn collapse_fit(conds: &[Condition]) -> Result<CollapseFit> {
    for c in conds {
        if c.points.is_empty() {
            return Err(Error::Usage("empty curve".into()));
        }
        if c.covariates.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("covariates must be positive, got {:?}", c.covariates)));
        }
    }
    if conds.len() < 2 {
        return Ok(CollapseFit { exponents: [0.0; 4], residual: 0.0 });
    }
    let rows = common_grid(conds)?;
    let logs: Vec<[f64; 4]> = conds.iter().map(|c| c.covariates.map(f64::ln)).collect();
    // a covariate that never changes has no identifiable exponent
    let mut free: Vec<usize> = (0..4).filter(|&i| logs.iter().any(|l| (l[i] - logs[0][i]).abs() > 1e-12)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let dist = Uniform::new(-1.0, 1.0);
    loop {
        let full = |x: &[f64]| {
            let mut p = [0.0; 4];
            for (k, &i) in free.iter().enumerate() {
                p[i] = x[k];
            }
            p
        };
        let obj = |x: &[f64]| spread(&rows, &logs, &full(x));
        let mut best: Option<(Vec<f64>, f64)> = None;
        for r in 0..RESTARTS {
            let start: Vec<f64> = if r == 0 { vec![0.0; free.len()] } else { free.iter().map(|_| dist.sample(&mut rng)).collect() };
            let res = nelder_mead(obj, &start, 0.1, NM_TOL, 20_000);
            if best.as_ref().map_or(true, |b| res.value < b.1) {
                best = Some((res.x, res.value));
            }
        }
        let (x, value) = best.unwrap_or_else(|| (vec![], obj(&[])));
        let p = full(&x);
        let keep: Vec<usize> = free.iter().copied().filter(|&i| p[i].abs() >= EXPONENT_CUTOFF).collect();
        if keep.len() == free.len() {
            return Ok(CollapseFit { exponents: p, residual: value });
        }
        free = keep;
    }
}

// --------------------------------------------------------------------- files

pub const TRIALS_HEADER: &str = "trial_id,source,source_x,source_y,start_x,start_y,t0,theta0,u_a,outcome,arrival_time,U_eff";
pub const STEPS_HEADER: &str = "trial_id,step,x,y,heading,c,grad_cx,grad_cy,u_fx,u_fy,delta_theta";

/// Writes the per-trial table, preceded by `# config_hash:` when given.
pub fn write_trials_csv<W: Write>(records: &[TrialRecord], config_hash: Option<&str>, w: &mut W) -> Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "# config_hash: {h}")?;
    }
    writeln!(w, "{TRIALS_HEADER}")?;
    for r in records {
        let at = r.arrival_time.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.trial_id,
            r.source_index,
            r.source[0],
            r.source[1],
            r.start[0],
            r.start[1],
            r.t0,
            r.theta0,
            r.u_a,
            r.termination.as_str(),
            at,
            effective_speed(r)
        )?;
    }
    Ok(())
}

pub fn write_steps_csv<W: Write>(records: &[TrialRecord], config_hash: Option<&str>, w: &mut W) -> Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "# config_hash: {h}")?;
    }
    writeln!(w, "{STEPS_HEADER}")?;
    for r in records {
        for (k, s) in r.steps.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.trial_id, k, s.x[0], s.x[1], s.heading, s.c, s.grad_c[0], s.grad_c[1], s.u_f[0], s.u_f[1], s.delta_theta
            )?;
        }
    }
    Ok(())
}

fn csv_rows<R: BufRead>(r: R, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != header {
                return Err(Error::Format { offset: i + 1, message: format!("expected header `{header}`") });
            }
            seen_header = true;
            continue;
        }
        out.push((i + 1, line.split(',').map(str::to_string).collect()));
    }
    if !seen_header {
        return Err(Error::Format { offset: 0, message: "missing CSV header".into() });
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(row: &[String], k: usize, line: usize) -> Result<T> {
    row.get(k)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format { offset: line, message: format!("bad or missing column {k}") })
}

/// Reads the tables written by [`write_trials_csv`] and
/// [`write_steps_csv`]. Line numbers are reported as the error offset.
pub fn read_trials<R1: BufRead, R2: BufRead>(trials: R1, steps: Option<R2>) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (line, row) in csv_rows(trials, TRIALS_HEADER)? {
        if row.len() != 12 {
            return Err(Error::Format { offset: line, message: format!("expected 12 columns, found {}", row.len()) });
        }
        let termination = match row[9].as_str() {
            "arrived" => Termination::Arrived,
            "boundary" => Termination::Boundary,
            "timeout" => Termination::Timeout,
            "running" => Termination::Running,
            s => return Err(Error::Format { offset: line, message: format!("unknown outcome `{s}`") }),
        };
        let arrival_time = if row[10].is_empty() { None } else { Some(field(&row, 10, line)?) };
        out.push(TrialRecord {
            trial_id: field(&row, 0, line)?,
            source_index: field(&row, 1, line)?,
            source: [field(&row, 2, line)?, field(&row, 3, line)?],
            start: [field(&row, 4, line)?, field(&row, 5, line)?],
            t0: field(&row, 6, line)?,
            theta0: field(&row, 7, line)?,
            u_a: field(&row, 8, line)?,
            termination,
            arrival_time,
            steps: Vec::new(),
        });
    }
    if let Some(steps) = steps {
        let index: std::collections::HashMap<u64, usize> = out.iter().enumerate().map(|(k, r)| (r.trial_id, k)).collect();
        for (line, row) in csv_rows(steps, STEPS_HEADER)? {
            if row.len() != 11 {
                return Err(Error::Format { offset: line, message: format!("expected 11 columns, found {}", row.len()) });
            }
            let id: u64 = field(&row, 0, line)?;
            let &k = index.get(&id).ok_or_else(|| Error::Format { offset: line, message: format!("step for unknown trial {id}") })?;
            let f = |i| field::<f64>(&row, i, line);
            out[k].steps.push(StepLog {
                x: [f(2)?, f(3)?],
                heading: f(4)?,
                c: f(5)?,
                grad_c: [f(6)?, f(7)?],
                u_f: [f(8)?, f(9)?],
                delta_theta: f(10)?,
            });
        }
    }
    Ok(out)
}
