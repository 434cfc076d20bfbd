//! Meta-gradient learning-rate adaptation for the actor-critic baseline.
//!
//! A separate meta critic estimates the current policy's value. After each
//! actor step the actor rate is moved along
//! `mean_x ∇_φ′ Q_meta(x, π_φ′(x)) · u`, where `u` is the realized actor step
//! divided by the rate (the step direction is held fixed with respect to the
//! rate).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::net::{adam_step, AdamState, Mlp, Scalar};
use crate::replay::SharedReplay;
use crate::rollout::{Learner, Policy};
use crate::td3::{self, Agent, RoundStats, Td3Hyper};

pub const ALPHA_MIN: f64 = 1e-6;
pub const ALPHA_MAX: f64 = 1e-1;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub q_meta: Mlp<f32>,
    pub q_meta_adam: AdamState<f32>,
    /// Current `(actor, critic)` learning rates.
    pub alpha: [f64; 2],
    pub alpha_adam: AdamState<f64>,
    /// Step size of the rate updates.
    pub beta: f64,
    pub tune_critic_lr: bool,
    pub bounds: (f64, f64),
}

impl MetaState {
    /// Meta critic starts as a copy of the first critic; rates start at the
    /// configured ones, clamped.
    pub fn new(agent: &Agent, h: &Td3Hyper, beta: f64, tune_critic_lr: bool) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return invalid("meta learning rate must be non-negative");
        }
        let bounds = (ALPHA_MIN, ALPHA_MAX);
        Ok(Self {
            q_meta: agent.critic1.clone(),
            q_meta_adam: AdamState::new(agent.critic1.num_params()),
            alpha: [h.lr_actor.clamp(bounds.0, bounds.1), h.lr_critic.clamp(bounds.0, bounds.1)],
            alpha_adam: AdamState::new(2),
            beta,
            tune_critic_lr,
            bounds,
        })
    }

    /// Hyper-parameters with the current rates substituted.
    pub fn hyper(&self, base: &Td3Hyper) -> Td3Hyper {
        Td3Hyper { lr_actor: self.alpha[0], lr_critic: self.alpha[1], ..base.clone() }
    }

    /// Adam ascent on the rates along `delta`, then clamp.
    pub fn apply_delta(&mut self, delta: [f64; 2]) -> Result<()> {
        let descent = [-delta[0], -delta[1]];
        adam_step(&mut self.alpha, &descent, &mut self.alpha_adam, self.beta)?;
        for a in &mut self.alpha {
            *a = a.clamp(self.bounds.0, self.bounds.1);
        }
        Ok(())
    }
}

fn concat<T: Copy>(a: &[T], a_cols: usize, b: &[T], b_cols: usize, rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
        out.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// Mean `Q(x, π(x))` over a batch of observations.
pub fn meta_objective<T: Scalar>(q: &Mlp<T>, actor: &Mlp<T>, obs: &[T], batch: usize) -> Result<f64> {
    let actions = actor.forward_batch(obs, batch)?.into_output();
    let inputs = concat(obs, actor.input_dim(), &actions, actor.output_dim(), batch);
    let out = q.forward_batch(&inputs, batch)?.into_output();
    Ok(out.iter().map(|v| v.as_f64()).sum::<f64>() / batch as f64)
}

/// `mean_x ∇_φ Q(x, π_φ(x)) · direction`, evaluated at the actor's current
/// (post-step) parameters.
pub fn meta_gradient<T: Scalar>(
    q: &Mlp<T>,
    actor: &Mlp<T>,
    direction: &[T],
    obs: &[T],
    batch: usize,
) -> Result<f64> {
    if direction.len() != actor.num_params() {
        return invalid("update direction does not match the actor");
    }
    if batch == 0 || obs.len() != batch * actor.input_dim() {
        return invalid("observation batch has the wrong width");
    }
    if q.input_dim() != actor.input_dim() + actor.output_dim() || q.output_dim() != 1 {
        return invalid("meta critic does not take (observation, action)");
    }
    let (obs_dim, act_dim) = (actor.input_dim(), actor.output_dim());
    let fwd = actor.forward_batch(obs, batch)?;
    let inputs = concat(obs, obs_dim, fwd.output(), act_dim, batch);
    let upstream = vec![T::of(1.0 / batch as f64); batch];
    let q_grads = q.gradients(&inputs, &upstream, batch)?;
    let dq_da: Vec<T> = q_grads
        .inputs
        .chunks_exact(obs_dim + act_dim)
        .flat_map(|row| row[obs_dim..].iter().copied())
        .collect();
    let actor_grads = actor.backward(&fwd, &dq_da)?;
    let g = dot(&actor_grads.params, direction);
    if !g.is_finite() {
        return Err(Error::Numeric("meta-gradient is not finite".into()));
    }
    Ok(g)
}

/// `mean_x ∇_θ Q₁(x, π(x)) · u_q` for the critic's realized step direction.
fn critic_meta_gradient(agent: &Agent, direction: &[f32], obs: &[f32], batch: usize) -> Result<f64> {
    let actions = agent.actor.forward_batch(obs, batch)?.into_output();
    let inputs = concat(obs, agent.obs_dim(), &actions, agent.act_dim(), batch);
    let upstream = vec![1.0 / batch as f32; batch];
    let grads = agent.critic1.gradients(&inputs, &upstream, batch)?;
    let g = dot(&grads.params, direction);
    if !g.is_finite() {
        return Err(Error::Numeric("meta-gradient is not finite".into()));
    }
    Ok(g)
}

/// One TD step of the meta critic on its own batch, toward the agent's
/// target-network n-step target, at the current critic rate. Returns the
/// pre-update squared error.
pub fn meta_critic_update<R: rand::Rng + ?Sized>(
    meta: &mut MetaState,
    agent: &Agent,
    batch: &crate::replay::NStepBatch,
    h: &Td3Hyper,
    rng: &mut R,
) -> Result<f64> {
    let targets = td3::compute_target(agent, batch, h, rng)?;
    let inputs = td3::concat_rows(&batch.obs, agent.obs_dim(), &batch.actions, agent.act_dim());
    td3::regress_critic(&mut meta.q_meta, &mut meta.q_meta_adam, &inputs, &targets, meta.alpha[1])
}

/// An agent whose learning rates are adapted by meta-gradients. The meta
/// critic draws its batches from a private stream so the main training
/// stream is consumed exactly as in plain TD3.
#[derive(Clone, Debug)]
pub struct MetaAgent {
    pub agent: Agent,
    pub meta: MetaState,
    rng: ChaCha8Rng,
}

impl MetaAgent {
    pub fn new(agent: Agent, h: &Td3Hyper, beta: f64, tune_critic_lr: bool, meta_seed: u64) -> Result<Self> {
        let meta = MetaState::new(&agent, h, beta, tune_critic_lr)?;
        Ok(Self { agent, meta, rng: ChaCha8Rng::seed_from_u64(meta_seed) })
    }

    /// One TD3 step at the current rates, a meta-critic step, and (after an
    /// actor step) a rate update. Returns the rate change applied.
    pub fn step<R: rand::Rng + ?Sized>(
        &mut self,
        buffer: &SharedReplay,
        base: &Td3Hyper,
        rng: &mut R,
    ) -> Result<(td3::StepOutcome, [f64; 2])> {
        let h = self.meta.hyper(base);
        let critic_before = self.meta.tune_critic_lr.then(|| self.agent.critic1.params().to_vec());
        let out = td3::train_step(&mut self.agent, buffer, &h, rng)?;

        let meta_batch = buffer.sample_nstep(h.batch_size, h.n_step, h.gamma, &mut self.rng)?;
        meta_critic_update(&mut self.meta, &self.agent, &meta_batch, &h, &mut self.rng)?;

        let mut delta = [0.0, 0.0];
        if let Some(actor) = &out.actor {
            let b = meta_batch.size;
            delta[0] = meta_gradient(&self.meta.q_meta, &self.agent.actor, &actor.direction, &meta_batch.obs, b)?;
            if let Some(before) = critic_before {
                let inv = (1.0 / h.lr_critic) as f32;
                let u_q: Vec<f32> =
                    self.agent.critic1.params().iter().zip(&before).map(|(a, b)| (a - b) * inv).collect();
                delta[1] = critic_meta_gradient(&self.agent, &u_q, &meta_batch.obs, b)?;
            }
            self.meta.apply_delta(delta)?;
        }
        Ok((out, delta))
    }
}

impl Policy for MetaAgent {
    fn act(&self, obs: &[f64], noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        td3::select_action(&self.agent, obs, noise_std, rng)
    }
}

impl Learner for MetaAgent {
    fn train(&mut self, buffer: &SharedReplay, h: &Td3Hyper, rng: &mut ChaCha8Rng) -> Result<RoundStats> {
        h.validate()?;
        let mut stats = RoundStats::default();
        let mut loss = 0.0;
        for _ in 0..h.grad_steps_per_round {
            let (out, _) = self.step(buffer, h, rng)?;
            loss += out.critic_loss;
            stats.critic_steps += 1;
            stats.actor_steps += out.actor.is_some() as usize;
        }
        if stats.critic_steps > 0 {
            stats.mean_critic_loss = loss / stats.critic_steps as f64;
        }
        Ok(stats)
    }
}
