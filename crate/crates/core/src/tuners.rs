//! Online hyper-parameter tuning with evolutionary strategies.
//!
//! Continuous hyper-parameters (log₁₀ learning rates) follow a Gaussian that
//! is updated either by the ES gradient estimator or by CEM; discrete ones
//! (the n-step horizon) follow a categorical distribution updated with the
//! score-function estimator. The round functions at the bottom run one
//! iteration of the sample/train/rollout/update loop over a population
//! sharing one replay buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::net::{adam_step, AdamState};
use crate::rollout::{Arena, Learner};
use crate::td3::{self, Agent, Td3Hyper};

/// Learning rates are clamped to `[10^LOG_LR_MIN, 10^LOG_LR_MAX]`.
pub const LOG_LR_MIN: f64 = -6.0;
pub const LOG_LR_MAX: f64 = -1.0;

const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FitnessRecord<E> {
    pub eta: E,
    pub fitness: f64,
    pub agent_index: usize,
}

/// `(f − mean) / (std + 1e-8)` with the population standard deviation.
pub fn standardize(fitness: &[f64]) -> Vec<f64> {
    let n = fitness.len() as f64;
    let mean = fitness.iter().sum::<f64>() / n;
    let var = fitness.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
    let scale = var.sqrt() + STD_EPS;
    fitness.iter().map(|f| (f - mean) / scale).collect()
}

fn shaped<E>(records: &[FitnessRecord<E>], standardized: bool) -> Result<Vec<f64>> {
    if records.iter().any(|r| !r.fitness.is_finite()) {
        return Err(Error::Numeric("non-finite fitness".into()));
    }
    let raw: Vec<f64> = records.iter().map(|r| r.fitness).collect();
    Ok(if standardized { standardize(&raw) } else { raw })
}

/// Mean of undiscounted episode returns.
pub fn fitness_estimate(returns: &[f64]) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::Unavailable("no episode returns to estimate fitness from".into()));
    }
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianMode {
    EsGradient,
    Cem,
}

/// Gaussian over log₁₀ learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTuner {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub beta: f64,
    pub n: usize,
    pub mode: GaussianMode,
    /// Standardize fitness before the ES update.
    pub standardize: bool,
    /// Added to the elite variance in CEM mode.
    pub var_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSamples {
    pub etas: Vec<Vec<f64>>,
    /// Standard normal draws with `eta = mu + sigma ⊙ noise`.
    pub noises: Vec<Vec<f64>>,
}

impl GaussianTuner {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, beta: f64, n: usize, mode: GaussianMode) -> Result<Self> {
        let t = Self { mu, sigma, beta, n, mode, standardize: true, var_floor: 1e-4 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() || self.mu.len() != self.sigma.len() {
            return invalid("mu and sigma must be non-empty and of equal length");
        }
        if self.sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return invalid("sigma must be positive");
        }
        if self.n < 2 {
            return invalid("population size must be at least 2");
        }
        if self.mode == GaussianMode::Cem && self.n < 4 {
            return invalid("CEM needs a population of at least 4");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || self.var_floor < 0.0 {
            return invalid("beta and the variance floor must be non-negative");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GaussianSamples {
        let mut etas = Vec::with_capacity(self.n);
        let mut noises = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
            etas.push(self.mu.iter().zip(&self.sigma).zip(&eps).map(|((m, s), e)| m + s * e).collect());
            noises.push(eps);
        }
        GaussianSamples { etas, noises }
    }

    fn check_records(&self, records: &[FitnessRecord<Vec<f64>>]) -> Result<()> {
        if records.is_empty() {
            return invalid("no fitness records");
        }
        if records.iter().any(|r| r.eta.len() != self.dim()) {
            return invalid("sample dimension differs from the tuner's");
        }
        Ok(())
    }

    /// `(1/(σN)) Σ_j f_j ε_j` per dimension with `ε_j = (η_j − μ)/σ`.
    pub fn es_gradient(&self, records: &[FitnessRecord<Vec<f64>>]) -> Result<Vec<f64>> {
        self.check_records(records)?;
        let f = shaped(records, self.standardize)?;
        let n = records.len() as f64;
        Ok((0..self.dim())
            .map(|d| {
                let s = self.sigma[d];
                let acc: f64 = records.iter().zip(&f).map(|(r, f)| f * (r.eta[d] - self.mu[d]) / s).sum();
                acc / (s * n)
            })
            .collect())
    }

    /// `μ ← μ + β·ĝ`; σ is left alone.
    pub fn es_gradient_update(&mut self, records: &[FitnessRecord<Vec<f64>>]) -> Result<()> {
        let g = self.es_gradient(records)?;
        for (m, g) in self.mu.iter_mut().zip(g) {
            *m += self.beta * g;
        }
        Ok(())
    }

    /// Refit `(μ, σ²)` to the top ⌈N/2⌉ samples, plus the variance floor.
    pub fn cem_update(&mut self, records: &[FitnessRecord<Vec<f64>>]) -> Result<()> {
        self.check_records(records)?;
        let elites = elite_indices(records)?;
        let k = elites.len() as f64;
        for d in 0..self.dim() {
            let mean = elites.iter().map(|&i| records[i].eta[d]).sum::<f64>() / k;
            let var = elites.iter().map(|&i| (records[i].eta[d] - mean).powi(2)).sum::<f64>() / k;
            self.mu[d] = mean;
            self.sigma[d] = (var + self.var_floor).sqrt();
        }
        Ok(())
    }

    pub fn update(&mut self, records: &[FitnessRecord<Vec<f64>>]) -> Result<()> {
        match self.mode {
            GaussianMode::EsGradient => self.es_gradient_update(records),
            GaussianMode::Cem => self.cem_update(records),
        }
    }
}

/// Indices of the ⌈N/2⌉ fittest records; ties keep the earlier index.
pub fn elite_indices<E>(records: &[FitnessRecord<E>]) -> Result<Vec<usize>> {
    if records.iter().any(|r| !r.fitness.is_finite()) {
        return Err(Error::Numeric("non-finite fitness".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].fitness.total_cmp(&records[a].fitness).then(a.cmp(&b)));
    order.truncate(records.len().div_ceil(2));
    Ok(order)
}

/// Map a log₁₀ learning-rate sample onto the hyper-parameters. One
/// dimension sets both rates; two set (actor, critic).
pub fn apply_log_lr(base: &Td3Hyper, eta: &[f64]) -> Td3Hyper {
    let lr = |x: f64| 10f64.powf(x.clamp(LOG_LR_MIN, LOG_LR_MAX));
    let mut h = base.clone();
    match eta {
        [both] => {
            h.lr_actor = lr(*both);
            h.lr_critic = lr(*both);
        }
        [actor, critic, ..] => {
            h.lr_actor = lr(*actor);
            h.lr_critic = lr(*critic);
        }
        [] => {}
    }
    h
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

/// Categorical over a discrete support (n-step horizons), with ε-uniform
/// exploration when sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalTuner {
    pub logits: Vec<f64>,
    pub adam: AdamState<f64>,
    pub epsilon: f64,
    pub n: usize,
    pub support: Vec<usize>,
    pub beta: f64,
    pub standardize: bool,
}

impl CategoricalTuner {
    /// Zero logits, Adam with learning rate `beta`.
    pub fn new(support: Vec<usize>, epsilon: f64, n: usize, beta: f64) -> Result<Self> {
        if support.is_empty() {
            return invalid("support must not be empty");
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return invalid("epsilon must lie in [0, 1]");
        }
        if n == 0 || !(beta >= 0.0) {
            return invalid("need at least one sample per update and beta ≥ 0");
        }
        Ok(Self {
            logits: vec![0.0; support.len()],
            adam: AdamState::new(support.len()),
            epsilon,
            n,
            support,
            beta,
            standardize: true,
        })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Probabilities actually used when sampling, `(1−ε)·softmax + ε/K`.
    pub fn sampling_probabilities(&self) -> Vec<f64> {
        let k = self.k() as f64;
        self.probabilities().iter().map(|p| (1.0 - self.epsilon) * p + self.epsilon / k).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let explore: f64 = rng.random();
        if explore < self.epsilon {
            return rng.random_range(0..self.k());
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let probs = self.probabilities();
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(self.k() - 1)
    }

    /// Index of the most probable value (first on ties).
    pub fn mode_index(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// `(1/N) Σ_j f_j (onehot(η_j) − softmax(L))`.
    pub fn ascent_direction(&self, records: &[FitnessRecord<usize>]) -> Result<Vec<f64>> {
        if records.is_empty() {
            return invalid("no fitness records");
        }
        if records.iter().any(|r| r.eta >= self.k()) {
            return invalid("sampled index outside the support");
        }
        let f = shaped(records, self.standardize)?;
        let probs = self.probabilities();
        let n = records.len() as f64;
        let mut dir = vec![0.0; self.k()];
        for (r, f) in records.iter().zip(&f) {
            for (i, d) in dir.iter_mut().enumerate() {
                let onehot = if i == r.eta { 1.0 } else { 0.0 };
                *d += f * (onehot - probs[i]);
            }
        }
        dir.iter_mut().for_each(|d| *d /= n);
        Ok(dir)
    }

    /// Adam ascent on the logits along the score-function estimate, then
    /// recentre the logits to mean zero.
    pub fn score_function_update(&mut self, records: &[FitnessRecord<usize>]) -> Result<()> {
        if records.len() != self.n {
            return invalid(format!("expected {} records, got {}", self.n, records.len()));
        }
        let dir = self.ascent_direction(records)?;
        let descent: Vec<f64> = dir.iter().map(|d| -d).collect();
        adam_step(&mut self.logits, &descent, &mut self.adam, self.beta)?;
        let mean = self.logits.iter().sum::<f64>() / self.k() as f64;
        self.logits.iter_mut().for_each(|l| *l -= mean);
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RoundMetrics {
    /// Fitness of every population episode, in sampling order.
    pub fitness: Vec<f64>,
    /// Return of the evaluation (main) agent's own episode, when it ran one.
    pub main_return: Option<f64>,
    pub episodes: usize,
    pub transitions: usize,
}

impl RoundMetrics {
    pub fn fitness_mean(&self) -> f64 {
        fitness_estimate(&self.fitness).unwrap_or(f64::NAN)
    }
}

/// One continuous-tuner iteration around a persistent main agent:
/// N clones train with `lr = 10^η_j`, each plays one episode into the shared
/// buffer, the Gaussian is updated from their returns, then the main agent
/// trains at the new central rate `10^μ` and plays one episode itself.
pub fn oht_es_continuous_round<L: Learner>(
    main: &mut L,
    tuner: &mut GaussianTuner,
    arena: &mut Arena,
    base: &Td3Hyper,
) -> Result<RoundMetrics> {
    tuner.validate()?;
    let samples = tuner.sample(&mut arena.streams.tuner);
    let hypers: Vec<Td3Hyper> = samples.etas.iter().map(|e| apply_log_lr(base, e)).collect();
    let mut clones = vec![main.clone(); tuner.n];
    arena.train_all(&mut clones, &hypers)?;
    let episodes = arena.collect_many(&clones, base.exploration_noise_std)?;
    let records: Vec<FitnessRecord<Vec<f64>>> = episodes
        .iter()
        .zip(samples.etas)
        .enumerate()
        .map(|(j, (ep, eta))| FitnessRecord { eta, fitness: ep.total_reward, agent_index: j })
        .collect();
    tuner.update(&records)?;

    let central = apply_log_lr(base, &tuner.mu);
    arena.train_all(std::slice::from_mut(main), std::slice::from_ref(&central))?;
    let own = arena.collect(&*main, base.exploration_noise_std)?;
    Ok(RoundMetrics {
        fitness: records.iter().map(|r| r.fitness).collect(),
        main_return: Some(own.total_reward),
        episodes: episodes.len() + 1,
        transitions: episodes.iter().map(|e| e.len()).sum::<usize>() + own.len(),
    })
}

/// One discrete-tuner iteration over K persistent agents (one per support
/// value): N times sample an index, play its agent for one episode, record
/// the return and train (every agent, or only the sampled one); then one
/// score-function update of the logits.
pub fn oht_es_discrete_round<L: Learner>(
    agents: &mut [L],
    tuner: &mut CategoricalTuner,
    arena: &mut Arena,
    base: &Td3Hyper,
    train_all_agents: bool,
) -> Result<RoundMetrics> {
    if agents.len() != tuner.k() {
        return invalid("need exactly one agent per support value");
    }
    let hypers: Vec<Td3Hyper> =
        tuner.support.iter().map(|&n| Td3Hyper { n_step: n, ..base.clone() }).collect();
    let mut records = Vec::with_capacity(tuner.n);
    let mut metrics = RoundMetrics::default();
    for _ in 0..tuner.n {
        let j = tuner.sample(&mut arena.streams.tuner);
        let ep = arena.collect(&agents[j], base.exploration_noise_std)?;
        metrics.transitions += ep.len();
        metrics.episodes += 1;
        records.push(FitnessRecord { eta: j, fitness: ep.total_reward, agent_index: j });
        if train_all_agents {
            arena.train_all(agents, &hypers)?;
        } else {
            arena.train_all(&mut agents[j..=j], &hypers[j..=j])?;
        }
    }
    tuner.score_function_update(&records)?;
    metrics.fitness = records.iter().map(|r| r.fitness).collect();
    Ok(metrics)
}

/// Parameter-space CEM over actor weights combined with TD3 updates.
#[derive(Clone, Debug)]
pub struct EsRlState {
    /// Evaluation agent: actor at the distribution mean, shared critics.
    pub mean_agent: Agent,
    pub var: Vec<f32>,
    pub n: usize,
    /// How many of the sampled actors receive gradient updates.
    pub k: usize,
    pub var_floor: f32,
}

impl EsRlState {
    pub fn new(agent: Agent, sigma_init: f64, n: usize, k: usize, var_floor: f64) -> Result<Self> {
        if n < 2 || k > n {
            return invalid("ES-RL needs n ≥ 2 and k ≤ n");
        }
        if !(sigma_init >= 0.0) || !(var_floor >= 0.0) {
            return invalid("ES-RL variances must be non-negative");
        }
        let var = vec![(sigma_init * sigma_init) as f32; agent.actor.num_params()];
        Ok(Self { mean_agent: agent, var, n, k, var_floor: var_floor as f32 })
    }
}

/// One CEM-RL style iteration: sample N actors around the mean, give the
/// first k of them a TD3 round (the critics are passed along from one to
/// the next), roll every actor out once, then refit mean and variance to
/// the fitter half.
pub fn es_rl_round(state: &mut EsRlState, arena: &mut Arena, h: &Td3Hyper) -> Result<RoundMetrics> {
    let mu = state.mean_agent.actor.params().to_vec();
    let mut population = Vec::with_capacity(state.n);
    for _ in 0..state.n {
        let mut member = state.mean_agent.clone();
        let theta: Vec<f32> = mu
            .iter()
            .zip(&state.var)
            .map(|(&m, &v)| {
                let e: f64 = StandardNormal.sample(&mut arena.streams.tuner);
                m + v.sqrt() * e as f32
            })
            .collect();
        member.set_actor_params(&theta)?;
        population.push(member);
    }
    for j in 0..state.k {
        if j > 0 {
            let prev = population[j - 1].clone();
            let cur = &mut population[j];
            cur.critic1 = prev.critic1;
            cur.critic2 = prev.critic2;
            cur.target_critic1 = prev.target_critic1;
            cur.target_critic2 = prev.target_critic2;
            cur.critic1_adam = prev.critic1_adam;
            cur.critic2_adam = prev.critic2_adam;
            cur.update_counter = prev.update_counter;
        }
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(arena.streams.train.random());
        td3::update_round(&mut population[j], &arena.buffer, h, &mut rng)?;
    }
    let episodes = arena.collect_many(&population, 0.0)?;
    let records: Vec<FitnessRecord<usize>> = episodes
        .iter()
        .enumerate()
        .map(|(j, ep)| FitnessRecord { eta: j, fitness: ep.total_reward, agent_index: j })
        .collect();
    let elites = elite_indices(&records)?;
    let count = elites.len() as f64;
    let dim = mu.len();
    let mut new_mu = vec![0f32; dim];
    for d in 0..dim {
        let mean = elites.iter().map(|&i| population[i].actor.params()[d] as f64).sum::<f64>() / count;
        let var = elites
            .iter()
            .map(|&i| (population[i].actor.params()[d] as f64 - mean).powi(2))
            .sum::<f64>()
            / count;
        new_mu[d] = mean as f32;
        state.var[d] = var as f32 + state.var_floor;
    }
    if state.k > 0 {
        let last = &population[state.k - 1];
        let m = &mut state.mean_agent;
        m.critic1 = last.critic1.clone();
        m.critic2 = last.critic2.clone();
        m.target_critic1 = last.target_critic1.clone();
        m.target_critic2 = last.target_critic2.clone();
        m.critic1_adam = last.critic1_adam.clone();
        m.critic2_adam = last.critic2_adam.clone();
        m.update_counter = last.update_counter;
    }
    state.mean_agent.set_actor_params(&new_mu)?;
    Ok(RoundMetrics {
        fitness: records.iter().map(|r| r.fitness).collect(),
        main_return: None,
        episodes: episodes.len(),
        transitions: episodes.iter().map(|e| e.len()).sum(),
    })
}
