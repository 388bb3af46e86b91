//! Trajectory store and fixed-length window sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::env::{Obs, Termination, OBS_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Obs,
    pub action: f64,
    pub reward: f64,
    pub done: Termination,
    pub next_obs: Obs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub steps: Vec<StepRecord>,
    /// Training episode counter at collection time.
    pub episode_index: usize,
}

/// Ring of whole episodes bounded by a total step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStore {
    episodes: VecDeque<EpisodeRecord>,
    capacity_steps: usize,
    total_steps: usize,
    next_id: u64,
}

impl ReplayStore {
    pub fn new(capacity_steps: usize) -> Self {
        Self { episodes: VecDeque::new(), capacity_steps, total_steps: 0, next_id: 0 }
    }

    pub fn capacity_steps(&self) -> usize {
        self.capacity_steps
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn get(&self, k: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(k)
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Appends an episode, assigning the next id, then evicts the oldest
    /// episodes until the step budget holds. Returns the id.
    pub fn push_episode(&mut self, steps: Vec<StepRecord>, episode_index: usize) -> Result<u64> {
        if steps.is_empty() {
            return Err(Error::Usage("cannot store an empty episode".into()));
        }
        if let Some(k) = steps[..steps.len() - 1].iter().position(|s| s.done.is_done()) {
            return Err(Error::Usage(format!("episode terminates at step {k} before its last record")));
        }
        let finite = |o: &Obs| o.iter().all(|x| x.is_finite());
        if let Some(k) = steps.iter().position(|s| !(finite(&s.obs) && finite(&s.next_obs) && s.action.is_finite() && s.reward.is_finite())) {
            return Err(Error::Usage(format!("non-finite value in step {k}")));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.total_steps += steps.len();
        self.episodes.push_back(EpisodeRecord { episode_id: id, steps, episode_index });
        while self.total_steps > self.capacity_steps {
            match self.episodes.pop_front() {
                Some(old) => self.total_steps -= old.steps.len(),
                None => break,
            }
        }
        Ok(id)
    }

    /// Restores a stored episode with its original id (checkpoint loading).
    pub(crate) fn restore(&mut self, ep: EpisodeRecord, next_id: u64) {
        self.total_steps += ep.steps.len();
        self.episodes.push_back(ep);
        self.next_id = next_id;
    }

    pub(crate) fn restore_next_id(&mut self, next_id: u64) {
        self.next_id = next_id;
    }
}

/// One sampled window: `burn_in` warm-up steps followed by `train_len`
/// training steps, both inside the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Position of the episode in the store when sampled.
    pub episode: usize,
    pub episode_id: u64,
    pub start: usize,
    pub burn_in: usize,
    pub train_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub window: usize,
    pub burn_in: usize,
    pub segments: Vec<Segment>,
}

/// Places a window in an episode of length `len`.
pub fn place_window<R: Rng + ?Sized>(len: usize, window: usize, burn_in: usize, rng: &mut R) -> (usize, usize, usize) {
    if len >= burn_in + window {
        let start = rng.gen_range(0..=len - burn_in - window);
        (start, burn_in, window)
    } else {
        let b = burn_in.min(len.saturating_sub(1));
        (0, b, len - b)
    }
}

/// Draws `batch` episodes uniformly with replacement and a window in each.
pub fn sample_segments<R: Rng + ?Sized>(
    store: &ReplayStore,
    rng: &mut R,
    window: usize,
    burn_in: usize,
    batch: usize,
) -> Result<SegmentBatch> {
    if store.is_empty() {
        return Err(Error::Usage("cannot sample from an empty store".into()));
    }
    if window == 0 {
        return Err(Error::Usage("window must be at least one step".into()));
    }
    let segments = (0..batch)
        .map(|_| {
            let k = rng.gen_range(0..store.len());
            let ep = &store.episodes[k];
            let (start, b, n) = place_window(ep.steps.len(), window, burn_in, rng);
            Segment { episode: k, episode_id: ep.episode_id, start, burn_in: b, train_len: n }
        })
        .collect();
    Ok(SegmentBatch { window, burn_in, segments })
}

/// Dense time-major arrays for one batch.
///
/// Columns `0..B` hold the burn-in, right-aligned so that every training
/// slice starts at column `B`; rows with a shorter burn-in keep a zero
/// recurrent state through the left padding. Column `B + k` holds training
/// step `k`, and the column after a segment's last real step holds that
/// step's successor observation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensors {
    pub steps: usize,
    pub batch: usize,
    pub burn_in: usize,
    pub window: usize,
    /// `steps * batch * OBS_DIM`.
    pub obs: Vec<f64>,
    /// `steps * batch`; taken actions at training columns, zero elsewhere.
    pub actions: Vec<f64>,
    /// `steps * batch`; zero on the left padding.
    pub active: Vec<f64>,
    /// `window * batch`, indexed by training step.
    pub mask: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl BatchTensors {
    pub fn build(store: &ReplayStore, sb: &SegmentBatch) -> Self {
        let (bmax, w) = (sb.burn_in, sb.window);
        let steps = bmax + w + 1;
        let n = sb.segments.len();
        let mut t = BatchTensors {
            steps,
            batch: n,
            burn_in: bmax,
            window: w,
            obs: vec![0.0; steps * n * OBS_DIM],
            actions: vec![0.0; steps * n],
            active: vec![1.0; steps * n],
            mask: vec![0.0; w * n],
            rewards: vec![0.0; w * n],
            terminal: vec![0.0; w * n],
        };
        for (b, seg) in sb.segments.iter().enumerate() {
            let ep = &store.episodes[seg.episode].steps;
            let put = |t: &mut BatchTensors, col: usize, o: &Obs| {
                let r = col * n + b;
                t.obs[r * OBS_DIM..(r + 1) * OBS_DIM].copy_from_slice(o);
            };
            let pad = bmax - seg.burn_in;
            for col in 0..pad {
                t.active[col * n + b] = 0.0;
            }
            for i in 0..seg.burn_in {
                put(&mut t, pad + i, &ep[seg.start + i].obs);
            }
            for k in 0..seg.train_len {
                let s = &ep[seg.start + seg.burn_in + k];
                put(&mut t, bmax + k, &s.obs);
                t.actions[(bmax + k) * n + b] = s.action;
                t.mask[k * n + b] = 1.0;
                t.rewards[k * n + b] = s.reward;
                t.terminal[k * n + b] = if s.done.is_done() { 1.0 } else { 0.0 };
            }
            let last = &ep[seg.start + seg.burn_in + seg.train_len - 1];
            put(&mut t, bmax + seg.train_len, &last.next_obs);
        }
        t
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}
