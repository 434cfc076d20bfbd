//! Built-in continuous-control tasks and the delayed-reward wrapper.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_len: usize,
    pub dt: f64,
}

/// Result of one environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode is over (time limit or terminal state).
    pub done: bool,
    /// A true terminal state; time-limit truncation leaves this false.
    pub terminal: bool,
}

pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Start a new episode. Deterministic in `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advance one step. Actions outside the box are clipped and counted.
    fn step(&mut self, action: &[f64]) -> Result<Step>;

    fn step_count(&self) -> usize;

    /// Number of steps whose action had to be clipped.
    fn clip_count(&self) -> u64;

    fn box_clone(&self) -> Box<dyn Env>;
}

impl Clone for Box<dyn Env> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Builds a task by name, wrapped in [`Delayed`] when `delay > 1`.
pub fn make_env(name: &str, delay: usize) -> Result<Box<dyn Env>> {
    let inner: Box<dyn Env> = match name {
        "pendulum" => Box::new(Pendulum::new()),
        "pointmass" => Box::new(PointMass::new()),
        other => return invalid(format!("unknown environment '{other}' (expected pendulum or pointmass)")),
    };
    if delay == 0 {
        return invalid("delay must be at least 1");
    }
    if delay == 1 {
        Ok(inner)
    } else {
        Ok(Box::new(Delayed::new(inner, delay)?))
    }
}

pub const ENV_NAMES: [&str; 2] = ["pendulum", "pointmass"];

/// Clip into the action box; returns whether anything was clipped.
fn clip_action(spec: &EnvSpec, action: &[f64]) -> Result<(Vec<f64>, bool)> {
    if action.len() != spec.act_dim {
        return invalid(format!("action has {} entries, expected {}", action.len(), spec.act_dim));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return invalid("action contains non-finite values");
    }
    let mut clipped = false;
    let out = action
        .iter()
        .zip(spec.action_low.iter().zip(&spec.action_high))
        .map(|(&a, (&lo, &hi))| {
            let c = a.clamp(lo, hi);
            clipped |= c != a;
            c
        })
        .collect();
    Ok((out, clipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Fresh,
    Running,
    Done,
}

fn check_phase(phase: Phase) -> Result<()> {
    match phase {
        Phase::Running => Ok(()),
        Phase::Fresh => Err(Error::Logic("step called before reset".into())),
        Phase::Done => Err(Error::Logic("step called after episode end without reset".into())),
    }
}

/// Angle wrapped to `[−π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Pendulum swing-up. `θ = 0` is upright; the episode starts at a uniform
/// angle in `[−π, π)` with angular velocity in `[−1, 1)`.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    clips: u64,
    phase: Phase,
}

impl Pendulum {
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    const GRAVITY: f64 = 10.0;
    const MASS: f64 = 1.0;
    const LENGTH: f64 = 1.0;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "pendulum".into(),
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-Self::MAX_TORQUE],
                action_high: vec![Self::MAX_TORQUE],
                episode_len: 200,
                dt: 0.05,
            },
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            clips: 0,
            phase: Phase::Fresh,
        }
    }

    /// Overwrite the physical state, e.g. to place the pendulum at rest.
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.phase = Phase::Running;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        check_phase(self.phase)?;
        let (u, clipped) = clip_action(&self.spec, action)?;
        self.clips += clipped as u64;
        let u = u[0];
        let th = wrap_angle(self.theta);
        // Cost is charged on the state the action is applied in.
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);

        let (g, m, l, dt) = (Self::GRAVITY, Self::MASS, Self::LENGTH, self.spec.dt);
        let acc = 3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 / (m * l * l) * u;
        self.theta_dot = (self.theta_dot + acc * dt).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * dt;
        self.steps += 1;
        let done = self.steps >= self.spec.episode_len;
        if done {
            self.phase = Phase::Done;
        }
        Ok(Step { obs: self.observe(), reward, done, terminal: false })
    }

    fn step_count(&self) -> usize {
        self.steps
    }

    fn clip_count(&self) -> u64 {
        self.clips
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }
}

/// 2-D double integrator that must reach a random goal.
///
/// Start positions are drawn from `[−0.5, 0.5]²`, goals from `[−1, 1]²`,
/// velocities start at zero. Positions are clamped to `[−1, 1]²` (the
/// velocity component into a wall is zeroed) and speeds to `[−2, 2]`.
/// The reward is the negative distance to the goal after the move.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    steps: usize,
    clips: u64,
    phase: Phase,
}

impl PointMass {
    pub const START_BOX: f64 = 0.5;
    const MAX_SPEED: f64 = 2.0;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "pointmass".into(),
                obs_dim: 6,
                act_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                episode_len: 100,
                dt: 0.1,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            steps: 0,
            clips: 0,
            phase: Phase::Fresh,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.goal = goal;
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1]]
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Self::START_BOX;
        self.pos = [rng.random_range(-s..s), rng.random_range(-s..s)];
        self.goal = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.vel = [0.0; 2];
        self.steps = 0;
        self.phase = Phase::Running;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        check_phase(self.phase)?;
        let (a, clipped) = clip_action(&self.spec, action)?;
        self.clips += clipped as u64;
        let dt = self.spec.dt;
        for k in 0..2 {
            self.vel[k] = (self.vel[k] + a[k] * dt).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            let next = self.pos[k] + self.vel[k] * dt;
            if next.abs() > 1.0 {
                self.vel[k] = 0.0;
            }
            self.pos[k] = next.clamp(-1.0, 1.0);
        }
        let dx = self.pos[0] - self.goal[0];
        let dy = self.pos[1] - self.goal[1];
        let reward = -(dx * dx + dy * dy).sqrt();
        self.steps += 1;
        let done = self.steps >= self.spec.episode_len;
        if done {
            self.phase = Phase::Done;
        }
        Ok(Step { obs: self.observe(), reward, done, terminal: false })
    }

    fn step_count(&self) -> usize {
        self.steps
    }

    fn clip_count(&self) -> u64 {
        self.clips
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }
}

/// Emits the accumulated reward only every `d`-th step (1-indexed) and
/// flushes any remainder on the final step of the episode, so episode
/// returns are unchanged.
#[derive(Clone)]
pub struct Delayed {
    inner: Box<dyn Env>,
    delay: usize,
    pending: f64,
    spec: EnvSpec,
}

impl Delayed {
    pub fn new(inner: Box<dyn Env>, delay: usize) -> Result<Self> {
        if delay < 1 {
            return invalid("delay must be at least 1");
        }
        let mut spec = inner.spec().clone();
        if delay > 1 {
            spec.name = format!("{}-delay{delay}", spec.name);
        }
        Ok(Self { inner, delay, pending: 0.0, spec })
    }

    pub fn delay(&self) -> usize {
        self.delay
    }
}

/// Wrap `env` so rewards arrive in sums every `delay` steps.
pub fn wrap_delayed(env: Box<dyn Env>, delay: usize) -> Result<Box<dyn Env>> {
    Ok(Box::new(Delayed::new(env, delay)?))
}

impl Env for Delayed {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.pending = 0.0;
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let mut step = self.inner.step(action)?;
        self.pending += step.reward;
        let t = self.inner.step_count();
        if t % self.delay == 0 || step.done {
            step.reward = self.pending;
            self.pending = 0.0;
        } else {
            step.reward = 0.0;
        }
        Ok(step)
    }

    fn step_count(&self) -> usize {
        self.inner.step_count()
    }

    fn clip_count(&self) -> u64 {
        self.inner.clip_count()
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }
}
