//! Twin-critic, delayed-actor off-policy learner with n-step targets.
//!
//! One [`update_round`] is the base update `f(ψ, D, η)` that the tuners
//! treat as a black box: a fixed number of critic steps with an actor step
//! (and Polyak target update) on every `policy_delay`-th of them.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::envs::EnvSpec;
use crate::error::{invalid, Error, Result};
use crate::net::{adam_step, polyak_update, AdamState, Mlp, OutputActivation};
use crate::replay::{NStepBatch, SharedReplay};

#[derive(Clone, Debug, PartialEq)]
pub struct Td3Hyper {
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub n_step: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub policy_delay: u64,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub exploration_noise_std: f64,
    pub batch_size: usize,
    pub grad_steps_per_round: usize,
}

impl Default for Td3Hyper {
    fn default() -> Self {
        Self {
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            n_step: 1,
            gamma: 0.99,
            polyak: 0.005,
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            exploration_noise_std: 0.1,
            batch_size: 100,
            grad_steps_per_round: 200,
        }
    }
}

impl Td3Hyper {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr_actor >= 0.0 && self.lr_actor.is_finite(), "lr_actor must be non-negative"),
            (self.lr_critic >= 0.0 && self.lr_critic.is_finite(), "lr_critic must be non-negative"),
            (self.n_step >= 1, "n_step must be at least 1"),
            (self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (self.polyak > 0.0 && self.polyak <= 1.0, "polyak must lie in (0, 1]"),
            (self.policy_delay >= 1, "policy_delay must be at least 1"),
            (self.target_noise_std >= 0.0, "target_noise_std must be non-negative"),
            (self.target_noise_clip >= 0.0, "target_noise_clip must be non-negative"),
            (self.exploration_noise_std >= 0.0, "exploration_noise_std must be non-negative"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return invalid(msg);
            }
        }
        Ok(())
    }
}

/// Actor, twin critics, their target copies and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub actor: Mlp<f32>,
    pub critic1: Mlp<f32>,
    pub critic2: Mlp<f32>,
    pub target_actor: Mlp<f32>,
    pub target_critic1: Mlp<f32>,
    pub target_critic2: Mlp<f32>,
    pub actor_adam: AdamState<f32>,
    pub critic1_adam: AdamState<f32>,
    pub critic2_adam: AdamState<f32>,
    pub update_counter: u64,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
}

/// Outcome of one actor step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorUpdate {
    /// Mean `Q₁(x, π(x))` before the step.
    pub objective: f64,
    /// Realized parameter change divided by the actor learning rate (zero
    /// when the rate is zero).
    pub direction: Vec<f32>,
}

/// Outcome of one critic step (plus the delayed actor step, if it ran).
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub critic_loss: f64,
    pub actor: Option<ActorUpdate>,
}

#[derive(Clone, Debug, Default)]
pub struct RoundStats {
    pub critic_steps: usize,
    pub actor_steps: usize,
    pub mean_critic_loss: f64,
}

fn critic_head() -> OutputActivation<f32> {
    OutputActivation::Identity
}

/// Row-wise concatenation of two row-major matrices.
pub(crate) fn concat_rows(a: &[f32], a_cols: usize, b: &[f32], b_cols: usize) -> Vec<f32> {
    let rows = if a_cols == 0 { 0 } else { a.len() / a_cols };
    debug_assert_eq!(b.len(), rows * b_cols);
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
        out.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
    }
    out
}

/// Columns `from..from+width` of a row-major matrix with `cols` columns.
pub(crate) fn take_cols(m: &[f32], cols: usize, from: usize, width: usize) -> Vec<f32> {
    m.chunks_exact(cols).flat_map(|row| row[from..from + width].iter().copied()).collect()
}

impl Agent {
    /// Fresh agent; actor and critics use `hidden` as their hidden widths.
    pub fn new(spec: &EnvSpec, hidden: &[usize], seed: u64) -> Result<Self> {
        if spec.action_low.iter().zip(&spec.action_high).any(|(l, h)| l >= h) {
            return invalid("action box must satisfy low < high");
        }
        let mut actor_sizes = vec![spec.obs_dim];
        actor_sizes.extend_from_slice(hidden);
        actor_sizes.push(spec.act_dim);
        let mut critic_sizes = vec![spec.obs_dim + spec.act_dim];
        critic_sizes.extend_from_slice(hidden);
        critic_sizes.push(1);

        let head = OutputActivation::bounded(&spec.action_low, &spec.action_high);
        let actor = Mlp::new(&actor_sizes, head, seed.wrapping_mul(3).wrapping_add(1))?;
        let critic1 = Mlp::new(&critic_sizes, critic_head(), seed.wrapping_mul(3).wrapping_add(2))?;
        let critic2 = Mlp::new(&critic_sizes, critic_head(), seed.wrapping_mul(3).wrapping_add(3))?;
        Ok(Self {
            actor_adam: AdamState::new(actor.num_params()),
            critic1_adam: AdamState::new(critic1.num_params()),
            critic2_adam: AdamState::new(critic2.num_params()),
            target_actor: actor.clone(),
            target_critic1: critic1.clone(),
            target_critic2: critic2.clone(),
            actor,
            critic1,
            critic2,
            update_counter: 0,
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    fn clip(&self, a: f64, dim: usize) -> f64 {
        a.clamp(self.action_low[dim], self.action_high[dim])
    }

    /// Replace the actor (and its target) by a parameter vector, resetting
    /// the actor's optimizer state.
    pub fn set_actor_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.actor.num_params() {
            return invalid("actor parameter vector has the wrong length");
        }
        self.actor.params_mut().copy_from_slice(params);
        self.target_actor.params_mut().copy_from_slice(params);
        self.actor_adam = AdamState::new(params.len());
        Ok(())
    }
}

fn check_batch(agent: &Agent, batch: &NStepBatch) -> Result<()> {
    let b = batch.size;
    if batch.obs_dim != agent.obs_dim() || batch.act_dim != agent.act_dim() {
        return invalid("batch dimensions do not match the agent");
    }
    if batch.obs.len() != b * batch.obs_dim
        || batch.next_obs.len() != b * batch.obs_dim
        || batch.actions.len() != b * batch.act_dim
        || batch.returns.len() != b
        || batch.bootstrap.len() != b
    {
        return invalid("malformed n-step batch");
    }
    Ok(())
}

/// Smoothed target action `clip(π_tgt(x) + clip(ε, ±c), box)` per row.
fn target_actions<R: Rng + ?Sized>(
    agent: &Agent,
    next_obs: &[f32],
    batch: usize,
    h: &Td3Hyper,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let mut actions = agent.target_actor.forward_batch(next_obs, batch)?.into_output();
    let act_dim = agent.act_dim();
    let noise = (h.target_noise_std > 0.0)
        .then(|| Normal::new(0.0, h.target_noise_std).expect("positive std"));
    for (i, a) in actions.iter_mut().enumerate() {
        let eps = match &noise {
            Some(n) => n.sample(rng).clamp(-h.target_noise_clip, h.target_noise_clip),
            None => 0.0,
        };
        *a = agent.clip(*a as f64 + eps, i % act_dim) as f32;
    }
    Ok(actions)
}

/// `ret_n + w · min(Q_tgt1, Q_tgt2)(x_n, smoothed π_tgt(x_n))`, using target
/// networks only.
pub fn compute_target<R: Rng + ?Sized>(
    agent: &Agent,
    batch: &NStepBatch,
    h: &Td3Hyper,
    rng: &mut R,
) -> Result<Vec<f32>> {
    check_batch(agent, batch)?;
    let b = batch.size;
    let actions = target_actions(agent, &batch.next_obs, b, h, rng)?;
    let inputs = concat_rows(&batch.next_obs, agent.obs_dim(), &actions, agent.act_dim());
    let q1 = agent.target_critic1.forward_batch(&inputs, b)?.into_output();
    let q2 = agent.target_critic2.forward_batch(&inputs, b)?.into_output();
    Ok((0..b)
        .map(|i| {
            let q = q1[i].min(q2[i]) as f64;
            (batch.returns[i] + batch.bootstrap[i] * q) as f32
        })
        .collect())
}

/// One Adam step of `critic` toward `targets`; returns the pre-update MSE.
pub(crate) fn regress_critic(
    critic: &mut Mlp<f32>,
    adam: &mut AdamState<f32>,
    inputs: &[f32],
    targets: &[f32],
    lr: f64,
) -> Result<f64> {
    let b = targets.len();
    let fwd = critic.forward_batch(inputs, b)?;
    let residual: Vec<f32> = fwd.output().iter().zip(targets).map(|(q, y)| q - y).collect();
    let loss = residual.iter().map(|&r| (r as f64) * (r as f64)).sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("critic loss is not finite".into()));
    }
    let scale = 2.0 / b as f32;
    let upstream: Vec<f32> = residual.iter().map(|r| r * scale).collect();
    let grads = critic.backward(&fwd, &upstream)?;
    adam_step(critic.params_mut(), &grads.params, adam, lr)?;
    Ok(loss)
}

/// One step on both critics against the shared target. Returns the mean of
/// the two critics' pre-update mean squared errors.
pub fn critic_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    batch: &NStepBatch,
    h: &Td3Hyper,
    rng: &mut R,
) -> Result<f64> {
    let targets = compute_target(agent, batch, h, rng)?;
    let inputs = concat_rows(&batch.obs, agent.obs_dim(), &batch.actions, agent.act_dim());
    let l1 = regress_critic(&mut agent.critic1, &mut agent.critic1_adam, &inputs, &targets, h.lr_critic)?;
    let l2 = regress_critic(&mut agent.critic2, &mut agent.critic2_adam, &inputs, &targets, h.lr_critic)?;
    Ok(0.5 * (l1 + l2))
}

/// `∂ mean Q(x, a) / ∂a` for each row, through the critic's input gradient.
pub(crate) fn action_gradients(
    critic: &Mlp<f32>,
    obs: &[f32],
    actions: &[f32],
    batch: usize,
) -> Result<(f64, Vec<f32>)> {
    let obs_dim = obs.len() / batch;
    let act_dim = actions.len() / batch;
    let inputs = concat_rows(obs, obs_dim, actions, act_dim);
    let fwd = critic.forward_batch(&inputs, batch)?;
    let objective = fwd.output().iter().map(|&q| q as f64).sum::<f64>() / batch as f64;
    let upstream = vec![1.0 / batch as f32; batch];
    let grads = critic.backward(&fwd, &upstream)?;
    Ok((objective, take_cols(&grads.inputs, obs_dim + act_dim, obs_dim, act_dim)))
}

/// Ascend the actor along given per-row action gradients `∂J/∂a`, then
/// Polyak-update all three targets.
pub fn apply_actor_gradient(
    agent: &mut Agent,
    obs: &[f32],
    batch: usize,
    dj_da: &[f32],
    h: &Td3Hyper,
) -> Result<Vec<f32>> {
    let fwd = agent.actor.forward_batch(obs, batch)?;
    let descent: Vec<f32> = dj_da.iter().map(|g| -g).collect();
    let grads = agent.actor.backward(&fwd, &descent)?;
    let before = agent.actor.params().to_vec();
    adam_step(agent.actor.params_mut(), &grads.params, &mut agent.actor_adam, h.lr_actor)?;
    let direction = if h.lr_actor > 0.0 {
        let inv = (1.0 / h.lr_actor) as f32;
        agent.actor.params().iter().zip(&before).map(|(a, b)| (a - b) * inv).collect()
    } else {
        vec![0.0; before.len()]
    };
    polyak_update(&mut agent.target_actor, &agent.actor, h.polyak)?;
    polyak_update(&mut agent.target_critic1, &agent.critic1, h.polyak)?;
    polyak_update(&mut agent.target_critic2, &agent.critic2, h.polyak)?;
    Ok(direction)
}

/// Deterministic policy-gradient step ascending `mean Q₁(x, π(x))`.
pub fn actor_update(agent: &mut Agent, obs: &[f32], h: &Td3Hyper) -> Result<ActorUpdate> {
    let batch = obs.len() / agent.obs_dim();
    if batch == 0 || obs.len() != batch * agent.obs_dim() {
        return invalid("observation batch has the wrong width");
    }
    let actions = agent.actor.forward_batch(obs, batch)?.into_output();
    let (objective, dq_da) = action_gradients(&agent.critic1, obs, &actions, batch)?;
    let direction = apply_actor_gradient(agent, obs, batch, &dq_da, h)?;
    Ok(ActorUpdate { objective, direction })
}

/// One critic step on a fresh sample, plus the actor step when the update
/// counter hits a multiple of `policy_delay`.
pub fn train_step<R: Rng + ?Sized>(
    agent: &mut Agent,
    buffer: &SharedReplay,
    h: &Td3Hyper,
    rng: &mut R,
) -> Result<StepOutcome> {
    let batch = buffer.sample_nstep(h.batch_size, h.n_step, h.gamma, rng)?;
    let critic_loss = critic_update(agent, &batch, h, rng)?;
    agent.update_counter += 1;
    let actor = if agent.update_counter % h.policy_delay == 0 {
        Some(actor_update(agent, &batch.obs, h)?)
    } else {
        None
    };
    Ok(StepOutcome { critic_loss, actor })
}

/// `h.grad_steps_per_round` training steps.
pub fn update_round<R: Rng + ?Sized>(
    agent: &mut Agent,
    buffer: &SharedReplay,
    h: &Td3Hyper,
    rng: &mut R,
) -> Result<RoundStats> {
    h.validate()?;
    let mut stats = RoundStats::default();
    let mut loss_sum = 0.0;
    for _ in 0..h.grad_steps_per_round {
        let out = train_step(agent, buffer, h, rng)?;
        loss_sum += out.critic_loss;
        stats.critic_steps += 1;
        stats.actor_steps += out.actor.is_some() as usize;
    }
    if stats.critic_steps > 0 {
        stats.mean_critic_loss = loss_sum / stats.critic_steps as f64;
    }
    Ok(stats)
}

/// `clip(π(obs) + N(0, noise_std²), box)`.
pub fn select_action<R: RngCore + ?Sized>(
    agent: &Agent,
    obs: &[f64],
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if obs.len() != agent.obs_dim() {
        return invalid("observation width does not match the actor");
    }
    let x: Vec<f32> = obs.iter().map(|&v| v as f32).collect();
    let out = agent.actor.forward(&x)?;
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("positive std"));
    Ok(out
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let eps = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            agent.clip(a as f64 + eps, i)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, Pendulum};
    use crate::replay::{ReplayBuffer, Transition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> EnvSpec {
        Pendulum::new().spec().clone()
    }

    fn small_agent(seed: u64) -> Agent {
        Agent::new(&spec(), &[16, 16], seed).unwrap()
    }

    fn filled_buffer(seed: u64) -> SharedReplay {
        let mut env = Pendulum::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(3, 1, 10_000).unwrap();
        for ep in 0..3 {
            let mut obs = env.reset(seed + ep);
            for k in 0..200 {
                let a = rng.random_range(-2.0..2.0);
                let s = env.step(&[a]).unwrap();
                buf.append(Transition {
                    obs: obs.iter().map(|&v| v as f32).collect(),
                    action: vec![a as f32],
                    reward: s.reward,
                    next_obs: s.obs.iter().map(|&v| v as f32).collect(),
                    terminal: s.terminal,
                    episode_id: ep,
                    step_index: k,
                })
                .unwrap();
                obs = s.obs;
            }
        }
        SharedReplay::new(buf)
    }

    fn sample(buf: &SharedReplay, n: usize, seed: u64) -> NStepBatch {
        buf.sample_nstep(32, n, 0.99, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn terminal_target_is_return() {
        let agent = small_agent(0);
        let mut batch = sample(&filled_buffer(1), 3, 0);
        batch.bootstrap.fill(0.0);
        let y = compute_target(&agent, &batch, &Td3Hyper::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (t, r) in y.iter().zip(&batch.returns) {
            assert_eq!(*t, *r as f32);
        }
    }

    #[test]
    fn equal_critics_without_noise() {
        let mut agent = small_agent(2);
        agent.target_critic2 = agent.target_critic1.clone();
        let batch = sample(&filled_buffer(3), 2, 1);
        let h = Td3Hyper { target_noise_std: 0.0, ..Td3Hyper::default() };
        let y = compute_target(&agent, &batch, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..batch.size {
            let x = &batch.next_obs[i * 3..(i + 1) * 3];
            let a = agent.target_actor.forward(x).unwrap();
            let q = agent.target_critic1.forward(&[x, &a[..]].concat()).unwrap()[0] as f64;
            let expect = (batch.returns[i] + batch.bootstrap[i] * q) as f32;
            assert!((y[i] - expect).abs() <= 1e-5 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn target_arithmetic() {
        let v = 2.9701f64 + 0.970299 * 10.0;
        assert!((v - 12.67309).abs() < 1e-12);
    }

    #[test]
    fn target_uses_minimum_of_twin_critics() {
        let mut agent = small_agent(4);
        // Shift critic 2 up by a constant through its output bias.
        let last = agent.target_critic2.num_layers() - 1;
        agent.target_critic2 = agent.target_critic1.clone();
        agent.target_critic2.bias_mut(last)[0] += 5.0;
        let batch = sample(&filled_buffer(5), 1, 2);
        let h = Td3Hyper { target_noise_std: 0.0, ..Td3Hyper::default() };
        let y = compute_target(&agent, &batch, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut lower = agent.clone();
        lower.target_critic2 = lower.target_critic1.clone();
        let y_lower = compute_target(&lower, &batch, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y, y_lower);
    }

    #[test]
    fn target_ignores_online_networks() {
        let agent = small_agent(6);
        let mut scrambled = agent.clone();
        scrambled.actor = small_agent(99).actor;
        scrambled.critic1 = small_agent(98).critic1;
        scrambled.critic2 = small_agent(97).critic2;
        let batch = sample(&filled_buffer(7), 3, 3);
        let h = Td3Hyper::default();
        let a = compute_target(&agent, &batch, &h, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = compute_target(&scrambled, &batch, &h, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_critic_rate_leaves_critics() {
        let mut agent = small_agent(8);
        let before = agent.clone();
        let batch = sample(&filled_buffer(9), 1, 0);
        let h = Td3Hyper { lr_critic: 0.0, ..Td3Hyper::default() };
        critic_update(&mut agent, &batch, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(agent.critic1, before.critic1);
        assert_eq!(agent.critic2, before.critic2);
    }

    #[test]
    fn critic_at_target_has_zero_loss() {
        let mut agent = small_agent(10);
        // Zero output layers make every Q zero; a zero-return terminal batch
        // then has target zero too.
        for net in [&mut agent.critic1, &mut agent.critic2, &mut agent.target_critic1, &mut agent.target_critic2] {
            let last = net.num_layers() - 1;
            net.weights_mut(last).fill(0.0);
        }
        let mut batch = sample(&filled_buffer(11), 1, 0);
        batch.returns.fill(0.0);
        batch.bootstrap.fill(0.0);
        let before = agent.clone();
        let loss = critic_update(&mut agent, &batch, &Td3Hyper::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(agent.critic1, before.critic1);
    }

    #[test]
    fn critic_loss_decreases_on_frozen_batch() {
        let mut agent = small_agent(12);
        let batch = sample(&filled_buffer(13), 1, 0);
        let h = Td3Hyper { target_noise_std: 0.0, ..Td3Hyper::default() };
        let targets = compute_target(&agent, &batch, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inputs = concat_rows(&batch.obs, 3, &batch.actions, 1);
        let mut losses = Vec::new();
        for _ in 0..101 {
            losses.push(
                regress_critic(&mut agent.critic1, &mut agent.critic1_adam, &inputs, &targets, 1e-3).unwrap(),
            );
        }
        let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(violations <= 5, "{violations} increases: {losses:?}");
        assert!(losses[100] < 0.5 * losses[0]);
    }

    #[test]
    fn zero_actor_rate_still_moves_targets() {
        let mut agent = small_agent(14);
        agent.critic1 = small_agent(15).critic1;
        let before = agent.clone();
        let obs = sample(&filled_buffer(16), 1, 0).obs;
        let h = Td3Hyper { lr_actor: 0.0, ..Td3Hyper::default() };
        let up = actor_update(&mut agent, &obs, &h).unwrap();
        assert_eq!(agent.actor, before.actor);
        assert!(up.direction.iter().all(|&d| d == 0.0));
        assert_ne!(agent.target_critic1, before.target_critic1);
    }

    #[test]
    fn actor_moves_toward_quadratic_optimum() {
        // Q(x, a) = −(a − 1)², so ∂Q/∂a = 2(1 − a) = +2 at a = 0.
        let mut agent = small_agent(17);
        let last = agent.actor.num_layers() - 1;
        agent.actor.weights_mut(last).fill(0.0);
        agent.actor.bias_mut(last)[0] = 0.0;
        let obs = vec![0.3f32, -0.2, 0.1];
        let a0 = agent.actor.forward(&obs).unwrap()[0];
        assert_eq!(a0, 0.0);
        let dq_da = vec![2.0 * (1.0 - a0)];
        assert_eq!(dq_da[0], 2.0);
        let h = Td3Hyper::default();
        for _ in 0..20 {
            let a = agent.actor.forward(&obs).unwrap()[0];
            apply_actor_gradient(&mut agent, &obs, 1, &[2.0 * (1.0 - a)], &h).unwrap();
        }
        let a1 = agent.actor.forward(&obs).unwrap()[0];
        assert!(a1 > 0.0 && a1 < 1.0, "{a1}");
    }

    #[test]
    fn policy_delay_counts_actor_steps() {
        let mut agent = small_agent(18);
        let buf = filled_buffer(19);
        for rounds in [1usize, 2, 5] {
            let mut a = agent.clone();
            let h = Td3Hyper { grad_steps_per_round: rounds, batch_size: 8, ..Td3Hyper::default() };
            let stats = update_round(&mut a, &buf, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(stats.actor_steps, rounds / 2);
            assert_eq!(a.update_counter, rounds as u64);
        }
        let h = Td3Hyper { grad_steps_per_round: 0, ..Td3Hyper::default() };
        let before = agent.clone();
        update_round(&mut agent, &buf, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(agent, before);
    }

    #[test]
    fn rounds_are_deterministic_and_rate_sensitive() {
        let buf = filled_buffer(20);
        let h = Td3Hyper { grad_steps_per_round: 10, batch_size: 16, ..Td3Hyper::default() };
        let run = |h: &Td3Hyper| {
            let mut a = small_agent(21);
            update_round(&mut a, &buf, h, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            a
        };
        assert_eq!(run(&h), run(&h));
        let fast = Td3Hyper { lr_actor: 1e-2, lr_critic: 1e-2, ..h.clone() };
        let (a, b) = (run(&h), run(&fast));
        let start = small_agent(21);
        let dist = |x: &Mlp<f32>, y: &Mlp<f32>| -> f64 {
            x.params().iter().zip(y.params()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt()
        };
        let moved_slow = dist(&a.critic1, &start.critic1);
        let moved_fast = dist(&b.critic1, &start.critic1);
        assert!(moved_slow > 0.0 && moved_fast > moved_slow);
    }

    #[test]
    fn actions_respect_box() {
        let agent = small_agent(22);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = [1.0, 0.0, 0.5];
        let a = select_action(&agent, &obs, 0.0, &mut rng).unwrap();
        assert_eq!(a, select_action(&agent, &obs, 0.0, &mut rng).unwrap());
        for _ in 0..1000 {
            let a = select_action(&agent, &obs, 0.1, &mut rng).unwrap();
            assert!((-2.0..=2.0).contains(&a[0]));
            let a = select_action(&agent, &obs, 10.0, &mut rng).unwrap();
            assert!((-2.0..=2.0).contains(&a[0]));
        }
        assert!(select_action(&agent, &[1.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn one_step_target_matches_textbook_formula() {
        let agent = small_agent(23);
        let batch = sample(&filled_buffer(24), 1, 5);
        let h = Td3Hyper::default();
        let y = compute_target(&agent, &batch, &h, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // Independent recomputation: same noise stream, per-sample networks.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, h.target_noise_std).unwrap();
        for i in 0..batch.size {
            let x = &batch.next_obs[i * 3..(i + 1) * 3];
            let a = agent.target_actor.forward(x).unwrap()[0] as f64;
            let a = (a + noise.sample(&mut rng).clamp(-0.5, 0.5)).clamp(-2.0, 2.0) as f32;
            let inp = [x, &[a][..]].concat();
            let q1 = agent.target_critic1.forward(&inp).unwrap()[0];
            let q2 = agent.target_critic2.forward(&inp).unwrap()[0];
            let r = batch.returns[i];
            let expect = (r + 0.99 * q1.min(q2) as f64) as f32;
            assert_eq!(batch.bootstrap[i], 0.99);
            assert!((y[i] - expect).abs() <= 1e-5 * expect.abs().max(1.0), "{} vs {expect}", y[i]);
        }
    }
}
