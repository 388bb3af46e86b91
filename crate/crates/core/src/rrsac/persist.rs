//! Training checkpoints: every piece of [`TrainState`] needed to resume a run
//! bit-exactly, plus the config and the grid hash of the field bank.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::replay::{EpisodeRecord, ReplayStore, StepRecord};
use super::{Agent, TrainConfig, TrainState};
use crate::env::{Termination, OBS_DIM};
use crate::nnet::checkpoint::Checkpoint;
use crate::nnet::Adam;
use crate::{Error, Result};

const STEP_WIDTH: usize = 2 * OBS_DIM + 3;

fn put_adam(ck: &mut Checkpoint, name: &str, a: &Adam) {
    ck.put_f64(&format!("{name}.m"), vec![a.m.len()], a.m.clone());
    ck.put_f64(&format!("{name}.v"), vec![a.v.len()], a.v.clone());
    ck.put_u64(&format!("{name}.t"), vec![a.t]);
}

fn get_adam(ck: &Checkpoint, name: &str, n: usize) -> Result<Adam> {
    let mut a = Adam::new(n);
    a.m = sized(ck, &format!("{name}.m"), n)?;
    a.v = sized(ck, &format!("{name}.v"), n)?;
    a.t = ck.u64(&format!("{name}.t"))?;
    Ok(a)
}

fn sized(ck: &Checkpoint, name: &str, n: usize) -> Result<Vec<f64>> {
    let v = ck.f64s(name)?;
    if v.len() != n {
        return Err(Error::Config(format!("checkpoint block `{name}` has {} values, network needs {n}", v.len())));
    }
    Ok(v.to_vec())
}

/// Serialises a training state.
pub fn to_checkpoint(st: &TrainState, cfg: &TrainConfig, grid_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (name, p) in [
        ("actor", &st.actor),
        ("critic1", &st.critic1),
        ("critic2", &st.critic2),
        ("target1", &st.target1),
        ("target2", &st.target2),
    ] {
        ck.put_f64(name, vec![p.len()], p.clone());
    }
    put_adam(&mut ck, "adam.actor", &st.adam_actor);
    put_adam(&mut ck, "adam.critic1", &st.adam_critic1);
    put_adam(&mut ck, "adam.critic2", &st.adam_critic2);
    put_adam(&mut ck, "adam.log_xi", &st.adam_xi);
    ck.put_f64("log_xi", vec![1], vec![st.log_xi]);
    ck.put_u64("counters", vec![st.env_steps, st.episodes, st.updates]);

    ck.put_bytes("rng.seed", st.rng.get_seed().to_vec());
    let pos = st.rng.get_word_pos();
    ck.put_u64("rng.stream_pos", vec![st.rng.get_stream(), pos as u64, (pos >> 64) as u64]);

    let store = &st.store;
    let mut meta = Vec::with_capacity(3 * store.len());
    let mut data = Vec::with_capacity(store.total_steps() * STEP_WIDTH);
    for ep in store.episodes() {
        meta.extend([ep.episode_id, ep.episode_index as u64, ep.steps.len() as u64]);
        for s in &ep.steps {
            data.extend_from_slice(&s.obs);
            data.extend([s.action, s.reward, s.done.code() as f64]);
            data.extend_from_slice(&s.next_obs);
        }
    }
    ck.put_u64("store.meta", meta);
    ck.put_f64("store.steps", vec![data.len() / STEP_WIDTH, STEP_WIDTH], data);
    ck.put_u64("store.info", vec![store.capacity_steps() as u64, store.next_id()]);

    ck.put_str("config", &serde_json::to_string(cfg).expect("config serialises"));
    ck.put_str("grid_hash", grid_hash);
    ck
}

/// A training state read back from a checkpoint.
#[derive(Debug, Clone)]
pub struct Restored {
    pub state: TrainState,
    pub config: TrainConfig,
    pub grid_hash: String,
}

pub fn from_checkpoint(ck: &Checkpoint, agent: &Agent) -> Result<Restored> {
    let na = agent.actor.n_params();
    let nc = agent.critic.n_params();
    let counters = ck.u64s("counters")?;
    if counters.len() != 3 {
        return Err(Error::Format { offset: 0, message: "counters block must hold 3 values".into() });
    }
    let log_xi = ck.f64s("log_xi")?.first().copied().unwrap_or(f64::NAN);
    if !log_xi.is_finite() {
        return Err(Error::Format { offset: 0, message: "temperature is not finite".into() });
    }

    let seed: [u8; 32] = ck
        .bytes("rng.seed")?
        .try_into()
        .map_err(|_| Error::Format { offset: 0, message: "rng seed must be 32 bytes".into() })?;
    let sp = ck.u64s("rng.stream_pos")?;
    if sp.len() != 3 {
        return Err(Error::Format { offset: 0, message: "rng position block must hold 3 values".into() });
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(sp[0]);
    rng.set_word_pos(sp[1] as u128 | ((sp[2] as u128) << 64));

    let info = ck.u64s("store.info")?;
    if info.len() != 2 {
        return Err(Error::Format { offset: 0, message: "store info block must hold 2 values".into() });
    }
    let mut store = ReplayStore::new(info[0] as usize);
    let meta = ck.u64s("store.meta")?;
    let data = ck.f64s("store.steps")?;
    if meta.len() % 3 != 0 {
        return Err(Error::Format { offset: 0, message: "store meta length is not a multiple of 3".into() });
    }
    let mut at = 0usize;
    for m in meta.chunks_exact(3) {
        let len = m[2] as usize;
        let end = at + len * STEP_WIDTH;
        if end > data.len() {
            return Err(Error::Format { offset: 0, message: "store steps shorter than its metadata".into() });
        }
        let steps = data[at..end]
            .chunks_exact(STEP_WIDTH)
            .map(|r| {
                let done = Termination::from_code(r[OBS_DIM + 2] as u8)
                    .ok_or_else(|| Error::Format { offset: 0, message: format!("bad termination code {}", r[OBS_DIM + 2]) })?;
                Ok(StepRecord {
                    obs: r[..OBS_DIM].try_into().unwrap(),
                    action: r[OBS_DIM],
                    reward: r[OBS_DIM + 1],
                    done,
                    next_obs: r[OBS_DIM + 3..].try_into().unwrap(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        store.restore(EpisodeRecord { episode_id: m[0], steps, episode_index: m[1] as usize }, info[1]);
        at = end;
    }
    if at != data.len() {
        return Err(Error::Format { offset: 0, message: "store steps longer than its metadata".into() });
    }
    if store.is_empty() {
        store = ReplayStore::new(info[0] as usize);
        store.restore_next_id(info[1]);
    }

    let config: TrainConfig = serde_json::from_str(&ck.string("config")?)
        .map_err(|e| Error::Format { offset: 0, message: format!("checkpoint config: {e}") })?;

    let state = TrainState {
        actor: sized(ck, "actor", na)?,
        critic1: sized(ck, "critic1", nc)?,
        critic2: sized(ck, "critic2", nc)?,
        target1: sized(ck, "target1", nc)?,
        target2: sized(ck, "target2", nc)?,
        log_xi,
        adam_actor: get_adam(ck, "adam.actor", na)?,
        adam_critic1: get_adam(ck, "adam.critic1", nc)?,
        adam_critic2: get_adam(ck, "adam.critic2", nc)?,
        adam_xi: get_adam(ck, "adam.log_xi", 1)?,
        env_steps: counters[0],
        episodes: counters[1],
        updates: counters[2],
        rng,
        store,
    };
    Ok(Restored { state, config, grid_hash: ck.string("grid_hash")? })
}

/// Reads only the actor parameters, refusing a checkpoint trained on another
/// field grid.
pub fn actor_from_checkpoint(ck: &Checkpoint, agent: &Agent, grid_hash: Option<&str>) -> Result<Vec<f64>> {
    if let Some(h) = grid_hash {
        let stored = ck.string("grid_hash")?;
        if stored != h {
            return Err(Error::Config(format!("checkpoint was trained on grid {stored}, fields have grid {h}")));
        }
    }
    sized(ck, "actor", agent.actor.n_params())
}
