//! FIFO replay buffer with uncorrected n-step sampling.
//!
//! Every stored transition gets a monotonically increasing sequence number.
//! Transitions of the same episode are chained through successor links, so
//! n-step lookups stay correct when several population members append
//! interleaved episodes to the one shared buffer.

use std::collections::HashMap;
use std::sync::{Mutex, MutexGuard};

use rand::Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f64,
    pub next_obs: Vec<f32>,
    /// True physical terminal; time-limit truncation is not terminal.
    pub terminal: bool,
    pub episode_id: u64,
    pub step_index: usize,
}

#[derive(Clone, Debug)]
struct Slot {
    transition: Transition,
    next: Option<u64>,
}

/// Uniformly sampled n-step targets, row-major arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NStepBatch {
    pub size: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<f32>,
    /// `Σ_{i<m} γ^i r_i`.
    pub returns: Vec<f64>,
    /// Observation after the `m`-th step.
    pub next_obs: Vec<f32>,
    /// `γ^m`, or 0 when a terminal state was reached.
    pub bootstrap: Vec<f64>,
    /// Number of rewards actually summed, `1 ≤ m ≤ n`.
    pub horizons: Vec<usize>,
    /// Sequence numbers of the sampled start transitions.
    pub starts: Vec<u64>,
}

pub struct ReplayBuffer {
    obs_dim: usize,
    act_dim: usize,
    capacity: usize,
    slots: Vec<Option<Slot>>,
    next_seq: u64,
    /// Last stored `(seq, step_index)` per episode.
    tails: HashMap<u64, (u64, usize)>,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, act_dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 || act_dim == 0 {
            return invalid("replay buffer needs positive capacity and dimensions");
        }
        Ok(Self {
            obs_dim,
            act_dim,
            capacity,
            slots: Vec::new(),
            next_seq: 0,
            tails: HashMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        (self.next_seq - self.oldest()) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of transitions ever appended.
    pub fn total_appended(&self) -> u64 {
        self.next_seq
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn oldest(&self) -> u64 {
        self.next_seq.saturating_sub(self.capacity as u64)
    }

    fn slot_index(&self, seq: u64) -> usize {
        (seq % self.capacity as u64) as usize
    }

    fn slot(&self, seq: u64) -> &Slot {
        self.slots[self.slot_index(seq)].as_ref().expect("live sequence number")
    }

    /// Stored transition with sequence number `seq`, if not yet evicted.
    pub fn get(&self, seq: u64) -> Option<&Transition> {
        (seq >= self.oldest() && seq < self.next_seq).then(|| &self.slot(seq).transition)
    }

    /// Live transitions in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &Transition)> + '_ {
        (self.oldest()..self.next_seq).map(move |s| (s, &self.slot(s).transition))
    }

    pub fn append(&mut self, t: Transition) -> Result<u64> {
        if t.obs.len() != self.obs_dim || t.next_obs.len() != self.obs_dim {
            return invalid(format!("observation width differs from buffer's {}", self.obs_dim));
        }
        if t.action.len() != self.act_dim {
            return invalid(format!("action width differs from buffer's {}", self.act_dim));
        }
        if !t.reward.is_finite() {
            return invalid("reward must be finite");
        }
        let seq = self.next_seq;
        let oldest_after = (seq + 1).saturating_sub(self.capacity as u64);
        if let Some(&(prev, prev_step)) = self.tails.get(&t.episode_id) {
            if prev >= oldest_after {
                if t.step_index != prev_step + 1 {
                    return invalid(format!(
                        "episode {} jumps from step {prev_step} to {}",
                        t.episode_id, t.step_index
                    ));
                }
                let idx = self.slot_index(prev);
                self.slots[idx].as_mut().unwrap().next = Some(seq);
            }
        }
        self.tails.insert(t.episode_id, (seq, t.step_index));
        let idx = self.slot_index(seq);
        let slot = Some(Slot { transition: t, next: None });
        if idx == self.slots.len() {
            self.slots.push(slot);
        } else {
            self.slots[idx] = slot;
        }
        self.next_seq += 1;
        if self.tails.len() > 4 * self.capacity.max(64) {
            let oldest = self.oldest();
            self.tails.retain(|_, (s, _)| *s >= oldest);
        }
        Ok(seq)
    }

    /// Uniform n-step sample without importance correction.
    ///
    /// From each start the walk follows the episode for up to `n` rewards,
    /// stopping early at a terminal (bootstrap weight 0) or where the stored
    /// episode ends (time limit, or not yet appended), in which case the
    /// shorter horizon `m` bootstraps with `γ^m`.
    pub fn sample_nstep<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<NStepBatch> {
        if self.is_empty() {
            return Err(Error::Unavailable("replay buffer is empty".into()));
        }
        if n == 0 {
            return invalid("n-step horizon must be at least 1");
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return invalid(format!("discount must lie in (0, 1), got {gamma}"));
        }
        let mut batch = NStepBatch {
            size: batch_size,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            obs: Vec::with_capacity(batch_size * self.obs_dim),
            actions: Vec::with_capacity(batch_size * self.act_dim),
            returns: Vec::with_capacity(batch_size),
            next_obs: Vec::with_capacity(batch_size * self.obs_dim),
            bootstrap: Vec::with_capacity(batch_size),
            horizons: Vec::with_capacity(batch_size),
            starts: Vec::with_capacity(batch_size),
        };
        let oldest = self.oldest();
        let len = self.len() as u64;
        for _ in 0..batch_size {
            let start = oldest + rng.random_range(0..len);
            let first = &self.slot(start).transition;
            batch.obs.extend_from_slice(&first.obs);
            batch.actions.extend_from_slice(&first.action);

            let mut ret = 0.0;
            let mut discount = 1.0;
            let mut m = 0;
            let mut cur = start;
            let weight = loop {
                let slot = self.slot(cur);
                ret += discount * slot.transition.reward;
                discount *= gamma;
                m += 1;
                if slot.transition.terminal {
                    break 0.0;
                }
                match slot.next {
                    Some(next) if m < n => cur = next,
                    _ => break discount,
                }
            };
            batch.next_obs.extend_from_slice(&self.slot(cur).transition.next_obs);
            batch.returns.push(ret);
            batch.bootstrap.push(weight);
            batch.horizons.push(m);
            batch.starts.push(start);
        }
        Ok(batch)
    }
}

/// Replay buffer behind one exclusive-access guard, shared by a population.
pub struct SharedReplay {
    inner: Mutex<ReplayBuffer>,
}

impl SharedReplay {
    pub fn new(buffer: ReplayBuffer) -> Self {
        Self { inner: Mutex::new(buffer) }
    }

    pub fn lock(&self) -> MutexGuard<'_, ReplayBuffer> {
        // A panic while holding the guard cannot leave the ring half-written:
        // every mutation happens after validation.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    pub fn total_appended(&self) -> u64 {
        self.lock().total_appended()
    }

    pub fn append_all(&self, transitions: impl IntoIterator<Item = Transition>) -> Result<()> {
        let mut guard = self.lock();
        for t in transitions {
            guard.append(t)?;
        }
        Ok(())
    }

    pub fn sample_nstep<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<NStepBatch> {
        self.lock().sample_nstep(batch_size, n, gamma, rng)
    }

    pub fn into_inner(self) -> ReplayBuffer {
        self.inner.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(episode_id: u64, step_index: usize, reward: f64, terminal: bool) -> Transition {
        Transition {
            obs: vec![step_index as f32],
            action: vec![0.0],
            reward,
            next_obs: vec![step_index as f32 + 1.0],
            terminal,
            episode_id,
            step_index,
        }
    }

    #[test]
    fn append_and_evict() {
        let mut buf = ReplayBuffer::new(1, 1, 2).unwrap();
        assert!(buf.is_empty());
        buf.append(tr(0, 0, 1.0, false)).unwrap();
        assert_eq!(buf.len(), 1);
        buf.append(tr(0, 1, 2.0, false)).unwrap();
        buf.append(tr(0, 2, 3.0, false)).unwrap();
        assert_eq!(buf.len(), 2);
        let rewards: Vec<f64> = buf.iter().map(|(_, t)| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0]);
        assert!(buf.get(0).is_none());
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut buf = ReplayBuffer::new(1, 1, 8).unwrap();
        let mut t = tr(0, 0, 1.0, false);
        t.obs.push(0.0);
        assert!(buf.append(t).is_err());
        assert!(buf.append(tr(0, 0, f64::NAN, false)).is_err());
        buf.append(tr(0, 0, 1.0, false)).unwrap();
        assert!(buf.append(tr(0, 2, 1.0, false)).is_err());
    }

    #[test]
    fn interleaved_episodes_stay_separate() {
        let mut buf = ReplayBuffer::new(1, 1, 16).unwrap();
        for k in 0..3 {
            buf.append(tr(7, k, 1.0, false)).unwrap();
            buf.append(tr(8, k, 10.0, false)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample_nstep(64, 3, 0.5, &mut rng).unwrap();
        for i in 0..batch.size {
            let ep = buf.get(batch.starts[i]).unwrap().episode_id;
            let unit = if ep == 7 { 1.0 } else { 10.0 };
            let expect: f64 = (0..batch.horizons[i]).map(|k| unit * 0.5f64.powi(k as i32)).sum();
            assert_eq!(batch.returns[i], expect);
        }
        let by_episode: Vec<u64> = buf.iter().filter(|(_, t)| t.episode_id == 8).map(|(s, _)| s).collect();
        assert_eq!(by_episode, vec![1, 3, 5]);
    }

    #[test]
    fn empty_buffer_is_unavailable() {
        let buf = ReplayBuffer::new(1, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample_nstep(1, 1, 0.9, &mut rng), Err(Error::Unavailable(_))));
    }

    #[test]
    fn one_step_reduces_to_td0() {
        let mut buf = ReplayBuffer::new(1, 1, 8).unwrap();
        buf.append(tr(0, 0, 3.0, false)).unwrap();
        buf.append(tr(1, 0, 5.0, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = buf.sample_nstep(32, 1, 0.99, &mut rng).unwrap();
        for i in 0..b.size {
            if b.returns[i] == 3.0 {
                assert_eq!(b.bootstrap[i], 0.99);
            } else {
                assert_eq!((b.returns[i], b.bootstrap[i]), (5.0, 0.0));
            }
        }
    }

    #[test]
    fn three_step_values() {
        let mut buf = ReplayBuffer::new(1, 1, 8).unwrap();
        for k in 0..3 {
            buf.append(tr(0, k, 1.0, false)).unwrap();
        }
        buf.append(tr(0, 3, 1.0, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = buf.sample_nstep(64, 3, 0.99, &mut rng).unwrap();
        let i = b.starts.iter().position(|&s| s == 0).expect("start 0 sampled");
        assert!((b.returns[i] - 2.9701).abs() < 1e-12);
        assert!((b.bootstrap[i] - 0.970299).abs() < 1e-12);
        assert_eq!(b.next_obs[i], 3.0);
    }

    #[test]
    fn terminal_truncates_without_bootstrap() {
        let mut buf = ReplayBuffer::new(1, 1, 8).unwrap();
        buf.append(tr(0, 0, 1.0, false)).unwrap();
        buf.append(tr(0, 1, 1.0, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = buf.sample_nstep(64, 3, 0.99, &mut rng).unwrap();
        let i = b.starts.iter().position(|&s| s == 0).unwrap();
        assert!((b.returns[i] - 1.99).abs() < 1e-12);
        assert_eq!(b.bootstrap[i], 0.0);
        assert_eq!(b.horizons[i], 2);
    }

    #[test]
    fn episode_edge_bootstraps_shorter_horizon() {
        let mut buf = ReplayBuffer::new(1, 1, 8).unwrap();
        buf.append(tr(0, 0, 1.0, false)).unwrap();
        buf.append(tr(0, 1, 1.0, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = buf.sample_nstep(64, 5, 0.9, &mut rng).unwrap();
        let i = b.starts.iter().position(|&s| s == 0).unwrap();
        assert_eq!(b.horizons[i], 2);
        assert!((b.bootstrap[i] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn shared_buffer_serves_every_member() {
        let shared = SharedReplay::new(ReplayBuffer::new(1, 1, 32).unwrap());
        shared.append_all((0..4).map(|k| tr(1, k, 1.0, false))).unwrap();
        shared.append_all((0..4).map(|k| tr(2, k, 2.0, false))).unwrap();
        assert_eq!(shared.total_appended(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = shared.sample_nstep(200, 1, 0.9, &mut rng).unwrap();
        assert!(b.returns.contains(&1.0) && b.returns.contains(&2.0));
    }
}
