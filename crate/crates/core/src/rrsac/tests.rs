use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::persist::{from_checkpoint, to_checkpoint};
use super::replay::place_window;
use super::replay::tests::tagged_episode;
use super::*;
use crate::env::curriculum_level;
use crate::fieldstore::FieldMeta;
use crate::flowsim::default_sources;

/// Coarse zero-flow bank with a Gaussian odor blob around each source.
pub(crate) fn blob_bank() -> Vec<FieldSeries> {
    let meta = FieldMeta { re: 100.0, sc: 1.0, j: 0.1, delta: 0.2 };
    default_sources()
        .into_iter()
        .map(|src| {
            FieldSeries::from_fn(41, 21, 0.5, [0.0, 0.0], 601, 0.1, src, meta, move |_, x, y| {
                let r2 = (x - src[0]).powi(2) + (y - src[1]).powi(2);
                (0.0, 0.0, (-r2 / 20.0).exp())
            })
            .unwrap()
        })
        .collect()
}

fn tiny_agent() -> Agent {
    let mut a = NetSpec::policy(OBS_DIM);
    a.trunk = vec![6, 5];
    a.hidden = 7;
    a.head = vec![5];
    let mut c = NetSpec::critic(OBS_DIM);
    c.trunk = vec![6, 5];
    c.hidden = 7;
    c.head = vec![5];
    Agent::new(a, c).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { window_steps: Some(4), burn_in: 3, batch: 5, update_start: 20, update_every: 5, zero_wall_time: true, ..Default::default() }
}

fn random_store(rng: &mut ChaCha8Rng, lens: &[usize]) -> ReplayStore {
    let mut store = ReplayStore::new(100_000);
    for (k, &len) in lens.iter().enumerate() {
        let mut ep = tagged_episode(k as f64, len);
        for s in ep.iter_mut() {
            s.obs[2] = rng.gen_range(-1.0..1.0);
            s.obs[3] = rng.gen_range(-1.0..1.0);
            s.next_obs[2] = rng.gen_range(-1.0..1.0);
            s.action = rng.gen_range(-1.0..1.0);
            s.reward = rng.gen_range(-2.0..2.0);
        }
        store.push_episode(ep, k).unwrap();
    }
    store
}

#[test]
fn soft_update_limits() {
    let mut t = vec![0.0, 5.0];
    soft_update(&mut t, &[1.0, -3.0], 1.0);
    assert_eq!(t, [1.0, -3.0]);
    let mut t = vec![0.0];
    soft_update(&mut t, &[1.0], 0.002);
    assert!((t[0] - 0.002).abs() < 1e-15);
}

#[test]
fn bellman_backup_examples() {
    assert_eq!(critic_target(3000.0, true, 123.0, 0.2, -1.0, 0.99), 3000.0);
    assert!((critic_target(1.0, false, 2.0, 0.2, -1.0, 0.99) - 3.178).abs() < 1e-12);
    assert!((critic_target(1.0, false, 2.0, 0.0, -1.0, 0.99) - 2.98).abs() < 1e-12);
}

#[test]
fn swapping_target_critics_leaves_targets_unchanged() {
    let agent = tiny_agent();
    let cfg = small_cfg();
    let st = TrainState::new(&agent, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = random_store(&mut rng, &[30, 6, 12]);
    let sb = sample_segments(&store, &mut rng, 4, 3, 6).unwrap();
    let t = BatchTensors::build(&store, &sb);
    let (_, pol) = eval_policy(&agent, &st.actor, &t).unwrap();
    let eps: Vec<f64> = (0..t.steps * t.batch).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a = soft_targets(&agent, [&st.target1, &st.target2], &pol, &eps, &t, 0.3, 0.99).unwrap();
    let b = soft_targets(&agent, [&st.target2, &st.target1], &pol, &eps, &t, 0.3, 0.99).unwrap();
    assert_eq!(a, b);
}

#[test]
fn all_padding_batch_changes_nothing() {
    let agent = tiny_agent();
    let cfg = small_cfg();
    let mut st = TrainState::new(&agent, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = random_store(&mut rng, &[10]);
    let sb = sample_segments(&store, &mut rng, 4, 3, 3).unwrap();
    let mut t = BatchTensors::build(&store, &sb);
    t.mask.iter_mut().for_each(|m| *m = 0.0);
    let before = st.clone();
    let s = update(&agent, &mut st, &t, &cfg, 0.99).unwrap();
    assert!(!s.applied);
    assert_eq!(st, before);
}

#[test]
fn padded_entries_have_no_influence() {
    let agent = tiny_agent();
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // short episodes force left padding and masked tail columns
    let store = random_store(&mut rng, &[3, 5, 2, 40]);
    let sb = sample_segments(&store, &mut rng, 4, 3, 8).unwrap();
    let t = BatchTensors::build(&store, &sb);
    let mut noisy = t.clone();
    let n = t.batch;
    for (b, seg) in sb.segments.iter().enumerate() {
        let pad = t.burn_in - seg.burn_in;
        // left padding, and every column after the successor observation
        let dead = (0..pad).chain(t.burn_in + seg.train_len + 1..t.steps);
        for col in dead {
            let r = col * n + b;
            for o in &mut noisy.obs[r * OBS_DIM..(r + 1) * OBS_DIM] {
                *o = rng.gen_range(-50.0..50.0);
            }
            noisy.actions[r] = rng.gen_range(-5.0..5.0);
        }
        for k in seg.train_len..t.window {
            noisy.rewards[k * n + b] = 1e6;
            noisy.terminal[k * n + b] = 1.0;
        }
    }
    assert_ne!(t, noisy);
    let mut a = TrainState::new(&agent, &cfg);
    let mut b = a.clone();
    for _ in 0..3 {
        update(&agent, &mut a, &t, &cfg, 0.99).unwrap();
        update(&agent, &mut b, &noisy, &cfg, 0.99).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn temperature_stays_positive_and_losses_finite() {
    let agent = tiny_agent();
    let cfg = TrainConfig { lr_temperature: 0.5, ..small_cfg() };
    let mut st = TrainState::new(&agent, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = random_store(&mut rng, &[20, 7, 15]);
    for _ in 0..40 {
        let sb = sample_segments(&store, &mut rng, 4, 3, 5).unwrap();
        let t = BatchTensors::build(&store, &sb);
        let s = update(&agent, &mut st, &t, &cfg, 0.99).unwrap();
        assert!(s.applied && s.critic_loss.is_finite() && s.actor_loss.is_finite());
        assert!(st.xi() > 0.0);
    }
    assert_eq!(st.updates, 40);
}

#[test]
fn critic_loss_decreases_on_a_fixed_batch() {
    let agent = tiny_agent();
    let cfg = TrainConfig { lr_actor: 0.0, lr_temperature: 0.0, tau: 0.0, lr_critic: 1e-2, ..small_cfg() };
    let mut st = TrainState::new(&agent, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = random_store(&mut rng, &[20, 20]);
    let sb = sample_segments(&store, &mut rng, 4, 3, 5).unwrap();
    let mut t = BatchTensors::build(&store, &sb);
    // terminal everywhere makes the target independent of the sampled actions
    t.terminal.iter_mut().for_each(|x| *x = 1.0);
    let first = update(&agent, &mut st, &t, &cfg, 0.99).unwrap().critic_loss;
    let mut last = first;
    for _ in 0..300 {
        last = update(&agent, &mut st, &t, &cfg, 0.99).unwrap().critic_loss;
    }
    assert!(last < 0.1 * first, "critic loss {first} -> {last}");
}

#[test]
fn sampler_never_crosses_episodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lens = [1, 3, 9, 13, 14, 30];
    let store = random_store(&mut rng, &lens);
    let (w, bi) = (4, 10);
    for _ in 0..200 {
        let sb = sample_segments(&store, &mut rng, w, bi, 50).unwrap();
        let t = BatchTensors::build(&store, &sb);
        let n = t.batch;
        for (b, seg) in sb.segments.iter().enumerate() {
            let tag = seg.episode as f64;
            let first = t.burn_in - seg.burn_in;
            let last = t.burn_in + seg.train_len;
            for (j, col) in (first..=last).enumerate() {
                let r = col * n + b;
                assert_eq!(t.obs[r * OBS_DIM], tag);
                assert_eq!(t.obs[r * OBS_DIM + 1], (seg.start + j) as f64);
            }
            assert!(seg.start + seg.burn_in + seg.train_len <= lens[seg.episode]);
        }
    }
}

#[test]
fn episode_choice_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = random_store(&mut rng, &[5, 50, 500]);
    let draws = 30_000;
    let sb = sample_segments(&store, &mut rng, 10, 10, draws).unwrap();
    let mut counts = [0usize; 3];
    for s in &sb.segments {
        counts[s.episode] += 1;
    }
    let p = 1.0 / 3.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn short_episode_placement_covers_every_real_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for len in 1..25 {
        let (s, b, n) = place_window(len, 10, 10, &mut rng);
        if len < 20 {
            assert_eq!((s, b, n), (0, 10.min(len - 1), len - 10.min(len - 1)));
        } else {
            assert_eq!((b, n), (10, 10));
        }
    }
}

struct Recorder {
    logs: Vec<EpisodeLog>,
    updates: Vec<(u64, u64)>,
    episode_indices: Vec<usize>,
}

impl TrainObserver for Recorder {
    fn episode(&mut self, log: &EpisodeLog) -> Result<()> {
        self.logs.push(log.clone());
        Ok(())
    }

    fn checkpoint(&mut self, _agent: &Agent, st: &TrainState) -> Result<()> {
        self.updates.push((st.env_steps, st.updates));
        self.episode_indices = st.store.episodes().map(|e| e.episode_index).collect();
        Ok(())
    }
}

fn run(cfg: &TrainConfig, env_cfg: &EnvConfig, bank: &[FieldSeries]) -> (Recorder, TrainState) {
    let agent = tiny_agent();
    let mut st = TrainState::new(&agent, cfg);
    let mut rec = Recorder { logs: vec![], updates: vec![], episode_indices: vec![] };
    train(&agent, &mut st, cfg, env_cfg, bank, &mut rec).unwrap();
    (rec, st)
}

fn short_env(n_total: usize) -> EnvConfig {
    EnvConfig { n_total, n_e: 2, t_max: 6.0, ..Default::default() }
}

#[test]
fn update_schedule_and_curriculum() {
    let bank = blob_bank();
    let cfg = TrainConfig { update_start: 500, update_every: 10, checkpoint_every: 1, ..small_cfg() };
    let env_cfg = EnvConfig { t_max: 30.0, n_e: 10, ..short_env(40) };
    let (rec, st) = run(&cfg, &env_cfg, &bank);
    for &(steps, updates) in &rec.updates {
        let expected = if steps > 500 { steps / 10 - 50 } else { 0 };
        assert_eq!(updates, expected, "after {steps} steps");
    }
    assert!(st.env_steps > 500, "episodes too short to reach the threshold");
    let levels: Vec<usize> = rec.episode_indices.iter().map(|&n| curriculum_level(n, &env_cfg)).collect();
    let expected: Vec<usize> = (0..40).map(|n| n / 10).collect();
    assert_eq!(levels, expected);
    let tiny = EnvConfig { n_e: 2, ..short_env(4) };
    assert_eq!((0..4).map(|n| curriculum_level(n, &tiny)).collect::<Vec<_>>(), [0, 0, 1, 1]);
}

#[test]
fn training_is_deterministic() {
    let bank = blob_bank();
    let cfg = small_cfg();
    let env_cfg = short_env(6);
    let (a, sa) = run(&cfg, &env_cfg, &bank);
    let (b, sb) = run(&cfg, &env_cfg, &bank);
    assert_eq!(a.logs, b.logs);
    assert_eq!(sa, sb);
    assert!(sa.updates > 0);
}

/// Saves a checkpoint every episode and fails after `stop` episodes.
struct Interrupt {
    stop: u64,
    saved: Vec<u8>,
}

impl TrainObserver for Interrupt {
    fn checkpoint(&mut self, _agent: &Agent, st: &TrainState) -> Result<()> {
        self.saved = to_checkpoint(st, &small_cfg(), "grid").encode();
        if st.episodes == self.stop {
            return Err(Error::Usage("interrupted".into()));
        }
        Ok(())
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let bank = blob_bank();
    let agent = tiny_agent();
    let cfg = TrainConfig { checkpoint_every: 1, ..small_cfg() };
    let env_cfg = short_env(6);
    let (_, straight) = run(&cfg, &env_cfg, &bank);

    let mut st = TrainState::new(&agent, &cfg);
    let mut obs = Interrupt { stop: 3, saved: vec![] };
    assert!(train(&agent, &mut st, &cfg, &env_cfg, &bank, &mut obs).is_err());
    let back = from_checkpoint(&crate::nnet::checkpoint::Checkpoint::decode(&obs.saved).unwrap(), &agent).unwrap();
    assert_eq!(back.state, st);
    assert_eq!(back.state.episodes, 3);
    assert_eq!(back.config, small_cfg());
    assert_eq!(back.grid_hash, "grid");
    let mut resumed = back.state;
    train(&agent, &mut resumed, &cfg, &env_cfg, &bank, &mut ()).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn window_from_memory_length() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.window(10.0).unwrap(), 10);
    let both = TrainConfig { t_m: Some(1.0), window_steps: Some(3), ..Default::default() };
    assert_eq!(both.window(10.0).unwrap(), 3);
    let none = TrainConfig { t_m: None, window_steps: None, ..Default::default() };
    assert!(none.window(10.0).is_err());
}
