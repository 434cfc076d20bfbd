//! Episode collection and the arena a population trains in: the shared
//! buffer, a prototype environment, seeded random streams and the worker
//! pool.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envs::Env;
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, SharedReplay, Transition};
use crate::td3::{self, Agent, RoundStats, Td3Hyper};

/// Anything that maps observations to actions.
pub trait Policy: Sync {
    fn act(&self, obs: &[f64], noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// A population member: a policy that can be trained from the shared buffer.
pub trait Learner: Policy + Clone + Send {
    fn train(&mut self, buffer: &SharedReplay, h: &Td3Hyper, rng: &mut ChaCha8Rng) -> Result<RoundStats>;
}

impl Policy for Agent {
    fn act(&self, obs: &[f64], noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        td3::select_action(self, obs, noise_std, rng)
    }
}

impl Learner for Agent {
    fn train(&mut self, buffer: &SharedReplay, h: &Td3Hyper, rng: &mut ChaCha8Rng) -> Result<RoundStats> {
        td3::update_round(self, buffer, h, rng)
    }
}

/// Uniform random actions over a box (warm-up and the low score anchor).
#[derive(Clone, Debug)]
pub struct UniformPolicy {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl UniformPolicy {
    pub fn for_env(env: &dyn Env) -> Self {
        Self { low: env.spec().action_low.clone(), high: env.spec().action_high.clone() }
    }
}

impl Policy for UniformPolicy {
    fn act(&self, _obs: &[f64], _noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.low.iter().zip(&self.high).map(|(&l, &h)| rng.random_range(l..h)).collect())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    /// Undiscounted sum of the rewards the environment emitted.
    pub total_reward: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Play one full episode.
pub fn run_episode<P: Policy + ?Sized>(
    policy: &P,
    env: &mut dyn Env,
    reset_seed: u64,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
    episode_id: u64,
) -> Result<Episode> {
    let mut obs = env.reset(reset_seed);
    let mut ep = Episode::default();
    loop {
        let action = policy.act(&obs, noise_std, rng)?;
        let step = env.step(&action)?;
        if !step.reward.is_finite() {
            return Err(Error::Numeric("environment produced a non-finite reward".into()));
        }
        ep.total_reward += step.reward;
        ep.transitions.push(Transition {
            obs: to_f32(&obs),
            action: to_f32(&action),
            reward: step.reward,
            next_obs: to_f32(&step.obs),
            terminal: step.terminal,
            episode_id,
            step_index: ep.transitions.len(),
        });
        obs = step.obs;
        if step.done {
            return Ok(ep);
        }
    }
}

/// Independent random streams derived from one master seed.
#[derive(Clone, Debug)]
pub struct Streams {
    /// Reset seeds for training episodes.
    pub env: ChaCha8Rng,
    /// Exploration noise and warm-up actions.
    pub explore: ChaCha8Rng,
    /// Batch sampling and target smoothing.
    pub train: ChaCha8Rng,
    /// Hyper-parameter sampling.
    pub tuner: ChaCha8Rng,
}

/// Seeds of every stream. The defaults derive from the master seed; any of
/// them can be overridden on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub env: u64,
    pub init: u64,
    pub explore: u64,
    pub train: u64,
    pub tuner: u64,
    pub eval: u64,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedPlan {
    /// Stream `k` gets `mix64(master ⊕ mix64(k))`.
    pub fn from_master(master: u64) -> Self {
        let derive = |k: u64| mix64(master ^ mix64(k));
        Self {
            env: derive(1),
            init: derive(2),
            explore: derive(3),
            train: derive(4),
            tuner: derive(5),
            eval: derive(6),
        }
    }

    pub fn streams(&self) -> Streams {
        Streams {
            env: ChaCha8Rng::seed_from_u64(self.env),
            explore: ChaCha8Rng::seed_from_u64(self.explore),
            train: ChaCha8Rng::seed_from_u64(self.train),
            tuner: ChaCha8Rng::seed_from_u64(self.tuner),
        }
    }
}

/// Everything a population shares while training.
pub struct Arena {
    pub buffer: SharedReplay,
    pub env: Box<dyn Env>,
    pub streams: Streams,
    pub next_episode: u64,
    /// Environment steps collected so far.
    pub env_steps: u64,
    pool: rayon::ThreadPool,
}

/// Worker count: `OHT_ES_THREADS` if set and positive, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("OHT_ES_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl Arena {
    pub fn new(env: Box<dyn Env>, capacity: usize, seeds: &SeedPlan, threads: usize) -> Result<Self> {
        let spec = env.spec().clone();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Logic(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            buffer: SharedReplay::new(ReplayBuffer::new(spec.obs_dim, spec.act_dim, capacity)?),
            env,
            streams: seeds.streams(),
            next_episode: 0,
            env_steps: 0,
            pool,
        })
    }

    pub fn episode_len(&self) -> usize {
        self.env.spec().episode_len
    }

    fn commit(&mut self, episodes: &[Episode]) -> Result<()> {
        for ep in episodes {
            self.env_steps += ep.len() as u64;
            self.buffer.append_all(ep.transitions.iter().cloned())?;
        }
        Ok(())
    }

    /// One episode by `policy`, appended to the shared buffer.
    pub fn collect<P: Policy + ?Sized>(&mut self, policy: &P, noise_std: f64) -> Result<Episode> {
        let seed = self.streams.env.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(self.streams.explore.next_u64());
        let id = self.next_episode;
        self.next_episode += 1;
        let mut env = self.env.clone();
        let ep = run_episode(policy, env.as_mut(), seed, noise_std, &mut rng, id)?;
        self.commit(std::slice::from_ref(&ep))?;
        Ok(ep)
    }

    /// One episode per policy, played in parallel and appended in order.
    pub fn collect_many<P: Policy>(&mut self, policies: &[P], noise_std: f64) -> Result<Vec<Episode>> {
        let jobs: Vec<(u64, u64, u64)> = policies
            .iter()
            .map(|_| {
                let id = self.next_episode;
                self.next_episode += 1;
                (self.streams.env.next_u64(), self.streams.explore.next_u64(), id)
            })
            .collect();
        let env = &self.env;
        let episodes: Result<Vec<Episode>> = self.pool.install(|| {
            policies
                .par_iter()
                .zip(jobs.par_iter())
                .map(|(p, &(seed, explore, id))| {
                    let mut env = env.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(explore);
                    run_episode(p, env.as_mut(), seed, noise_std, &mut rng, id)
                })
                .collect()
        });
        let episodes = episodes?;
        self.commit(&episodes)?;
        Ok(episodes)
    }

    /// Train each learner with its own hyper-parameters, in parallel. Each
    /// learner gets a private generator drawn from the training stream, so
    /// results do not depend on the worker count.
    pub fn train_all<L: Learner>(&mut self, learners: &mut [L], hypers: &[Td3Hyper]) -> Result<Vec<RoundStats>> {
        assert_eq!(learners.len(), hypers.len());
        let seeds: Vec<u64> = learners.iter().map(|_| self.streams.train.next_u64()).collect();
        let buffer = &self.buffer;
        self.pool.install(|| {
            learners
                .par_iter_mut()
                .zip(hypers.par_iter().zip(seeds.par_iter()))
                .map(|(l, (h, &s))| l.train(buffer, h, &mut ChaCha8Rng::seed_from_u64(s)))
                .collect()
        })
    }

    /// Random-action episodes until at least `steps` transitions are stored.
    pub fn warmup(&mut self, steps: u64) -> Result<()> {
        let policy = UniformPolicy::for_env(self.env.as_ref());
        while self.env_steps < steps {
            self.collect(&policy, 0.0)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;

    #[test]
    fn seed_plan_streams_differ_and_are_stable() {
        let a = SeedPlan::from_master(0);
        assert_eq!(a, SeedPlan::from_master(0));
        let all = [a.env, a.init, a.explore, a.train, a.tuner, a.eval];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(SeedPlan::from_master(1).env, a.env);
    }

    #[test]
    fn collect_many_is_thread_independent() {
        let run = |threads: usize| {
            let env = make_env("pendulum", 1).unwrap();
            let mut arena = Arena::new(env, 10_000, &SeedPlan::from_master(3), threads).unwrap();
            let pol = UniformPolicy::for_env(arena.env.as_ref());
            let eps = arena.collect_many(&vec![pol; 4], 0.0).unwrap();
            let rewards: Vec<f64> = arena.buffer.lock().iter().map(|(_, t)| t.reward).collect();
            (eps.iter().map(|e| e.total_reward).collect::<Vec<_>>(), rewards)
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn warmup_counts_steps() {
        let env = make_env("pointmass", 1).unwrap();
        let mut arena = Arena::new(env, 10_000, &SeedPlan::from_master(0), 1).unwrap();
        arena.warmup(250).unwrap();
        assert_eq!(arena.env_steps, 300);
        assert_eq!(arena.buffer.len(), 300);
        assert_eq!(arena.next_episode, 3);
    }

    #[test]
    fn episode_return_sums_rewards() {
        let mut env = make_env("pendulum", 4).unwrap();
        let pol = UniformPolicy::for_env(env.as_ref());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = run_episode(&pol, env.as_mut(), 5, 0.0, &mut rng, 0).unwrap();
        assert_eq!(ep.len(), 200);
        let s: f64 = ep.transitions.iter().map(|t| t.reward).sum();
        assert!((s - ep.total_reward).abs() < 1e-9);
    }
}
