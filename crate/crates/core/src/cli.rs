//! Experiment runner behind the `oht-es` binary: configuration, the
//! training loop for every algorithm, CSV output and checkpoints, plus the
//! `prop1` and `stats` drivers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{make_env, Env, ENV_NAMES};
use crate::error::{invalid, Error, Result};
use crate::harness::{self, aggregate_stats, parse_anchors, Prop1Estimator, Prop1Problem, ScoreTable};
use crate::metagrad::MetaAgent;
use crate::rollout::{worker_threads, Arena, SeedPlan};
use crate::td3::{Agent, Td3Hyper};
use crate::tuners::{self, CategoricalTuner, EsRlState, GaussianMode, GaussianTuner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Td3,
    OhtEsContinuous,
    OhtEsCem,
    OhtEsDiscrete,
    Metagrad,
    EsRl,
}

impl Algo {
    pub const ALL: [Algo; 6] =
        [Algo::Td3, Algo::OhtEsContinuous, Algo::OhtEsCem, Algo::OhtEsDiscrete, Algo::Metagrad, Algo::EsRl];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Td3 => "td3",
            Algo::OhtEsContinuous => "oht-es-continuous",
            Algo::OhtEsCem => "oht-es-cem",
            Algo::OhtEsDiscrete => "oht-es-discrete",
            Algo::Metagrad => "metagrad",
            Algo::EsRl => "es-rl",
        }
    }

    /// The matching `tuner.mode` value.
    pub fn tuner_mode(self) -> &'static str {
        match self {
            Algo::Td3 | Algo::Metagrad => "none",
            Algo::OhtEsContinuous => "es-gradient",
            Algo::OhtEsCem => "cem",
            Algo::OhtEsDiscrete => "categorical",
            Algo::EsRl => "es-rl",
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Algo::ALL.iter().map(|a| a.name()).collect();
            Error::InvalidArgument(format!("unknown algorithm '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub algo: Algo,
    pub env: String,
    pub delay: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub hidden: Vec<usize>,
    /// `grad_steps_per_round == 0` means one gradient step per collected
    /// environment step of an episode (the episode length).
    pub td3: Td3Hyper,
    pub replay_capacity: usize,
    pub warmup: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub tuner_n: usize,
    pub tuner_sigma: f64,
    pub tuner_beta: f64,
    pub tuner_epsilon: f64,
    pub tuner_support: Vec<usize>,
    pub tuner_train_all_agents: bool,
    pub tuner_mu: Vec<f64>,
    pub tuner_var_floor: f64,
    pub tuner_standardize: bool,
    pub tuner_eval_sample: bool,
    pub metagrad_beta: f64,
    pub metagrad_tune_critic_lr: bool,
    pub esrl_sigma_init: f64,
    pub esrl_var_floor: f64,
    pub esrl_k: usize,
    pub seeds: SeedPlan,
}

const KEYS: &[&str] = &[
    "algo", "env", "delay", "steps", "seed", "out", "net.hidden", "td3.lr_actor", "td3.lr_critic", "td3.n_step",
    "td3.gamma", "td3.polyak", "td3.policy_delay", "td3.target_noise_std", "td3.target_noise_clip",
    "td3.exploration_noise_std", "td3.batch_size", "td3.grad_steps_per_round", "replay.capacity", "warmup",
    "eval.every", "eval.episodes", "tuner.mode", "tuner.N", "tuner.sigma", "tuner.beta", "tuner.epsilon",
    "tuner.support", "tuner.train_all_agents", "tuner.mu", "tuner.var_floor", "tuner.standardize",
    "tuner.eval_sample", "metagrad.beta", "metagrad.tune_critic_lr", "esrl.sigma_init", "esrl.var_floor",
    "esrl.k", "seed.env", "seed.init", "seed.explore", "seed.train", "seed.tuner", "seed.eval",
];

/// Parses flat `key=value` text; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return invalid(format!("config line {}: expected key=value", i + 1));
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return invalid(format!("config line {}: unknown key '{k}'", i + 1));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Lookup<'a>(&'a BTreeMap<String, String>);

impl Lookup<'_> {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for {key}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for {key}"))))
                .collect(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Builds a configuration from key/value pairs, filling defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return invalid(format!("unknown config key '{k}'"));
        }
        let l = Lookup(map);
        let algo: Algo = l.get("algo", Algo::Td3)?;
        if let Some(mode) = map.get("tuner.mode") {
            if mode != algo.tuner_mode() {
                return invalid(format!("tuner.mode={mode} does not match algo={} (expects {})", algo.name(), algo.tuner_mode()));
            }
        }
        let d = Td3Hyper::default();
        let td3 = Td3Hyper {
            lr_actor: l.get("td3.lr_actor", d.lr_actor)?,
            lr_critic: l.get("td3.lr_critic", d.lr_critic)?,
            n_step: l.get("td3.n_step", d.n_step)?,
            gamma: l.get("td3.gamma", d.gamma)?,
            polyak: l.get("td3.polyak", d.polyak)?,
            policy_delay: l.get("td3.policy_delay", d.policy_delay)?,
            target_noise_std: l.get("td3.target_noise_std", d.target_noise_std)?,
            target_noise_clip: l.get("td3.target_noise_clip", d.target_noise_clip)?,
            exploration_noise_std: l.get("td3.exploration_noise_std", d.exploration_noise_std)?,
            batch_size: l.get("td3.batch_size", d.batch_size)?,
            grad_steps_per_round: l.get("td3.grad_steps_per_round", 0)?,
        };
        let seed: u64 = l.get("seed", 0)?;
        let base = SeedPlan::from_master(seed);
        let seeds = SeedPlan {
            env: l.get("seed.env", base.env)?,
            init: l.get("seed.init", base.init)?,
            explore: l.get("seed.explore", base.explore)?,
            train: l.get("seed.train", base.train)?,
            tuner: l.get("seed.tuner", base.tuner)?,
            eval: l.get("seed.eval", base.eval)?,
        };
        let discrete = algo == Algo::OhtEsDiscrete;
        let cfg = Self {
            algo,
            env: l.get("env", "pendulum".to_string())?,
            delay: l.get("delay", 1)?,
            total_steps: l.get("steps", 100_000)?,
            seed,
            out: l.get("out", PathBuf::from("runs/latest"))?,
            hidden: l.list("net.hidden", vec![300, 300])?,
            td3,
            replay_capacity: l.get("replay.capacity", 100_000)?,
            warmup: l.get("warmup", 1000)?,
            eval_every: l.get("eval.every", 2000)?,
            eval_episodes: l.get("eval.episodes", 5)?,
            tuner_n: l.get("tuner.N", if discrete { 6 } else { 10 })?,
            tuner_sigma: l.get("tuner.sigma", 0.5)?,
            tuner_beta: l.get("tuner.beta", 0.02)?,
            tuner_epsilon: l.get("tuner.epsilon", 0.1)?,
            tuner_support: l.list("tuner.support", vec![1, 2, 3, 4, 5])?,
            tuner_train_all_agents: l.get("tuner.train_all_agents", true)?,
            tuner_mu: l.list("tuner.mu", vec![-3.0, -3.0])?,
            tuner_var_floor: l.get("tuner.var_floor", 1e-4)?,
            tuner_standardize: l.get("tuner.standardize", true)?,
            tuner_eval_sample: l.get("tuner.eval_sample", false)?,
            metagrad_beta: l.get("metagrad.beta", 1e-4)?,
            metagrad_tune_critic_lr: l.get("metagrad.tune_critic_lr", false)?,
            esrl_sigma_init: l.get("esrl.sigma_init", 1e-3f64.sqrt())?,
            esrl_var_floor: l.get("esrl.var_floor", 1e-5)?,
            esrl_k: l.get("esrl.k", 5)?,
            seeds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return invalid(format!("unknown environment '{}' (expected {})", self.env, ENV_NAMES.join(" or ")));
        }
        if self.delay == 0 {
            return invalid("delay must be at least 1");
        }
        if self.total_steps < self.warmup {
            return invalid("steps must be at least the warm-up length");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return invalid("net.hidden needs positive layer widths");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return invalid("eval.every and eval.episodes must be positive");
        }
        if self.replay_capacity == 0 {
            return invalid("replay.capacity must be positive");
        }
        Td3Hyper { grad_steps_per_round: 1, ..self.td3.clone() }.validate()?;
        // Every setting is checked, whether or not the chosen algorithm reads it.
        if !(1..=2).contains(&self.tuner_mu.len()) {
            return invalid("tuner.mu takes one (shared) or two (actor,critic) log10 rates");
        }
        let mode = if self.algo == Algo::OhtEsCem { GaussianMode::Cem } else { GaussianMode::EsGradient };
        let gaussian_n = if matches!(self.algo, Algo::OhtEsContinuous | Algo::OhtEsCem) { self.tuner_n } else { self.tuner_n.max(4) };
        GaussianTuner::new(self.tuner_mu.clone(), vec![self.tuner_sigma; self.tuner_mu.len()], self.tuner_beta, gaussian_n, mode)?;
        if self.tuner_support.contains(&0) {
            return invalid("tuner.support values must be at least 1");
        }
        CategoricalTuner::new(self.tuner_support.clone(), self.tuner_epsilon, self.tuner_n, self.tuner_beta)?;
        if !(self.metagrad_beta >= 0.0) {
            return invalid("metagrad.beta must be non-negative");
        }
        if self.algo == Algo::EsRl && (self.tuner_n < 2 || self.esrl_k > self.tuner_n) {
            return invalid("es-rl needs tuner.N ≥ 2 and esrl.k ≤ tuner.N");
        }
        Ok(())
    }

    /// Canonical `key=value` listing of every setting.
    pub fn to_text(&self) -> String {
        let h = &self.td3;
        let s = &self.seeds;
        let pairs: Vec<(&str, String)> = vec![
            ("algo", self.algo.name().into()),
            ("env", self.env.clone()),
            ("delay", self.delay.to_string()),
            ("steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("net.hidden", join(&self.hidden)),
            ("td3.lr_actor", h.lr_actor.to_string()),
            ("td3.lr_critic", h.lr_critic.to_string()),
            ("td3.n_step", h.n_step.to_string()),
            ("td3.gamma", h.gamma.to_string()),
            ("td3.polyak", h.polyak.to_string()),
            ("td3.policy_delay", h.policy_delay.to_string()),
            ("td3.target_noise_std", h.target_noise_std.to_string()),
            ("td3.target_noise_clip", h.target_noise_clip.to_string()),
            ("td3.exploration_noise_std", h.exploration_noise_std.to_string()),
            ("td3.batch_size", h.batch_size.to_string()),
            ("td3.grad_steps_per_round", h.grad_steps_per_round.to_string()),
            ("replay.capacity", self.replay_capacity.to_string()),
            ("warmup", self.warmup.to_string()),
            ("eval.every", self.eval_every.to_string()),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("tuner.mode", self.algo.tuner_mode().into()),
            ("tuner.N", self.tuner_n.to_string()),
            ("tuner.sigma", self.tuner_sigma.to_string()),
            ("tuner.beta", self.tuner_beta.to_string()),
            ("tuner.epsilon", self.tuner_epsilon.to_string()),
            ("tuner.support", join(&self.tuner_support)),
            ("tuner.train_all_agents", self.tuner_train_all_agents.to_string()),
            ("tuner.mu", join(&self.tuner_mu)),
            ("tuner.var_floor", self.tuner_var_floor.to_string()),
            ("tuner.standardize", self.tuner_standardize.to_string()),
            ("tuner.eval_sample", self.tuner_eval_sample.to_string()),
            ("metagrad.beta", self.metagrad_beta.to_string()),
            ("metagrad.tune_critic_lr", self.metagrad_tune_critic_lr.to_string()),
            ("esrl.sigma_init", self.esrl_sigma_init.to_string()),
            ("esrl.var_floor", self.esrl_var_floor.to_string()),
            ("esrl.k", self.esrl_k.to_string()),
            ("seed.env", s.env.to_string()),
            ("seed.init", s.init.to_string()),
            ("seed.explore", s.explore.to_string()),
            ("seed.train", s.train.to_string()),
            ("seed.tuner", s.tuner.to_string()),
            ("seed.eval", s.eval.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Decimal rendering with 9 significant digits (no exponent).
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let point = exp + 1;
    let mut s = if point <= 0 {
        format!("0.{}{}", "0".repeat((-point) as usize), digits)
    } else if point as usize >= digits.len() {
        format!("{}{}", digits, "0".repeat(point as usize - digits.len()))
    } else {
        format!("{}.{}", &digits[..point as usize], &digits[point as usize..])
    };
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if neg {
        s.insert(0, '-');
    }
    s
}

/// Policy being trained by one of the algorithms.
enum Learners {
    Single(Agent),
    Meta(Box<MetaAgent>),
    Continuous { main: Agent, tuner: GaussianTuner },
    Discrete { agents: Vec<Agent>, tuner: CategoricalTuner, eval_rng: ChaCha8Rng },
    EsRl(Box<EsRlState>),
}

impl Learners {
    fn eval_agent(&mut self, sample: bool) -> &Agent {
        match self {
            Learners::Single(a) => a,
            Learners::Meta(m) => &m.agent,
            Learners::Continuous { main, .. } => main,
            Learners::Discrete { agents, tuner, eval_rng } => {
                let i = if sample { tuner.sample(eval_rng) } else { tuner.mode_index() };
                &agents[i]
            }
            Learners::EsRl(s) => &s.mean_agent,
        }
    }

    fn alphas(&self, h: &Td3Hyper) -> [f64; 2] {
        match self {
            Learners::Meta(m) => m.meta.alpha,
            Learners::Continuous { tuner, .. } => {
                let c = tuners::apply_log_lr(h, &tuner.mu);
                [c.lr_actor, c.lr_critic]
            }
            _ => [h.lr_actor, h.lr_critic],
        }
    }

    fn extra_header(&self) -> Vec<String> {
        match self {
            Learners::Continuous { tuner, .. } => (0..tuner.dim()).flat_map(|d| [format!("mu_{d}"), format!("sigma_{d}")]).collect(),
            Learners::Discrete { tuner, .. } => tuner.support.iter().map(|n| format!("p_n{n}")).collect(),
            Learners::EsRl(_) => vec!["param_std_mean".into()],
            _ => vec![],
        }
    }

    fn extra_values(&self) -> Vec<f64> {
        match self {
            Learners::Continuous { tuner, .. } => tuner.mu.iter().zip(&tuner.sigma).flat_map(|(m, s)| [*m, *s]).collect(),
            Learners::Discrete { tuner, .. } => tuner.probabilities(),
            Learners::EsRl(s) => vec![s.var.iter().map(|v| (*v as f64).sqrt()).sum::<f64>() / s.var.len().max(1) as f64],
            _ => vec![],
        }
    }

    fn write_checkpoint(&mut self, path: &Path) -> Result<()> {
        let agent = self.eval_agent(false).clone();
        let mut w = BufWriter::new(File::create(path)?);
        agent.actor.write_snapshot(&mut w)?;
        agent.critic1.write_snapshot(&mut w)?;
        agent.critic2.write_snapshot(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Outcome of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub env_steps: u64,
    pub rows: usize,
    pub final_eval: f64,
}

/// A run that stopped early; the checkpoint was written when possible.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub checkpointed: bool,
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

struct Progress {
    out: BufWriter<File>,
    rows: usize,
}

impl Progress {
    fn create(path: &Path, extra: &[String]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header = vec!["step", "eval_return", "fitness_mean", "alpha_actor", "alpha_critic"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend_from_slice(extra);
        write!(out, "{}\n", header.join(","))?;
        out.flush()?;
        Ok(Self { out, rows: 0 })
    }

    fn row(&mut self, step: u64, values: &[f64]) -> Result<()> {
        let mut line = step.to_string();
        for v in values {
            line.push(',');
            line.push_str(&fmt_sig9(*v));
        }
        write!(self.out, "{line}\n")?;
        self.out.flush()?;
        self.rows += 1;
        Ok(())
    }
}

/// Execute a configured run, writing `config.txt`, `progress.csv` and
/// `checkpoint.bin` into `cfg.out`.
pub fn run(cfg: &RunConfig) -> std::result::Result<RunSummary, RunFailure> {
    let fail = |error: Error| RunFailure { error, checkpointed: false };
    cfg.validate().map_err(fail)?;
    fs::create_dir_all(&cfg.out).map_err(|e| fail(e.into()))?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text()).map_err(|e| fail(e.into()))?;

    let train_env = make_env(&cfg.env, cfg.delay).map_err(fail)?;
    let eval_env = make_env(&cfg.env, 1).map_err(fail)?;
    let spec = eval_env.spec().clone();
    let mut h = cfg.td3.clone();
    if h.grad_steps_per_round == 0 {
        h.grad_steps_per_round = spec.episode_len;
    }
    let mut arena = Arena::new(train_env, cfg.replay_capacity, &cfg.seeds, worker_threads()).map_err(fail)?;
    let agent = Agent::new(&spec, &cfg.hidden, cfg.seeds.init).map_err(fail)?;

    let mut learners = match cfg.algo {
        Algo::Td3 => Learners::Single(agent),
        Algo::Metagrad => Learners::Meta(Box::new(
            MetaAgent::new(agent, &h, cfg.metagrad_beta, cfg.metagrad_tune_critic_lr, cfg.seeds.tuner).map_err(fail)?,
        )),
        Algo::OhtEsContinuous | Algo::OhtEsCem => {
            let mode = if cfg.algo == Algo::OhtEsCem { GaussianMode::Cem } else { GaussianMode::EsGradient };
            let mut tuner = GaussianTuner::new(cfg.tuner_mu.clone(), vec![cfg.tuner_sigma; cfg.tuner_mu.len()], cfg.tuner_beta, cfg.tuner_n, mode)
                .map_err(fail)?;
            tuner.var_floor = cfg.tuner_var_floor;
            tuner.standardize = cfg.tuner_standardize;
            Learners::Continuous { main: agent, tuner }
        }
        Algo::OhtEsDiscrete => {
            let mut tuner = CategoricalTuner::new(cfg.tuner_support.clone(), cfg.tuner_epsilon, cfg.tuner_n, cfg.tuner_beta).map_err(fail)?;
            tuner.standardize = cfg.tuner_standardize;
            let agents = vec![agent; tuner.k()];
            Learners::Discrete { agents, tuner, eval_rng: ChaCha8Rng::seed_from_u64(cfg.seeds.eval ^ 0x5eed) }
        }
        Algo::EsRl => Learners::EsRl(Box::new(
            EsRlState::new(agent, cfg.esrl_sigma_init, cfg.tuner_n, cfg.esrl_k, cfg.esrl_var_floor).map_err(fail)?,
        )),
    };

    let result = drive(cfg, &h, &mut arena, eval_env.as_ref(), &mut learners);
    let ckpt = learners.write_checkpoint(&cfg.out.join("checkpoint.bin"));
    match result {
        Ok(summary) => {
            ckpt.map_err(fail)?;
            Ok(summary)
        }
        Err(error) => Err(RunFailure { error, checkpointed: ckpt.is_ok() }),
    }
}

fn drive(cfg: &RunConfig, h: &Td3Hyper, arena: &mut Arena, eval_env: &dyn Env, learners: &mut Learners) -> Result<RunSummary> {
    let mut progress = Progress::create(&cfg.out.join("progress.csv"), &learners.extra_header())?;
    arena.warmup(cfg.warmup)?;
    let mut next_tick = cfg.eval_every;
    let mut fitness: Vec<f64> = Vec::new();
    let mut last_eval = f64::NAN;
    let noise = h.exploration_noise_std;

    loop {
        while next_tick <= arena.env_steps.min(cfg.total_steps) {
            let eval_seed = cfg.seeds.eval;
            last_eval = harness::evaluate_policy(learners.eval_agent(cfg.tuner_eval_sample), eval_env, cfg.eval_episodes, eval_seed)?;
            let fit = tuners::fitness_estimate(&fitness).unwrap_or(f64::NAN);
            let alpha = learners.alphas(h);
            let mut values = vec![last_eval, fit, alpha[0], alpha[1]];
            values.extend(learners.extra_values());
            progress.row(next_tick, &values)?;
            fitness.clear();
            next_tick += cfg.eval_every;
        }
        if arena.env_steps >= cfg.total_steps {
            break;
        }
        match learners {
            Learners::Single(agent) => {
                let ep = arena.collect(agent, noise)?;
                fitness.push(ep.total_reward);
                arena.train_all(std::slice::from_mut(agent), std::slice::from_ref(h))?;
            }
            Learners::Meta(agent) => {
                let ep = arena.collect(agent.as_ref(), noise)?;
                fitness.push(ep.total_reward);
                arena.train_all(std::slice::from_mut(agent.as_mut()), std::slice::from_ref(h))?;
            }
            Learners::Continuous { main, tuner } => {
                let m = tuners::oht_es_continuous_round(main, tuner, arena, h)?;
                fitness.extend(m.fitness);
            }
            Learners::Discrete { agents, tuner, .. } => {
                let m = tuners::oht_es_discrete_round(agents, tuner, arena, h, cfg.tuner_train_all_agents)?;
                fitness.extend(m.fitness);
            }
            Learners::EsRl(state) => {
                let m = tuners::es_rl_round(state, arena, h)?;
                fitness.extend(m.fitness);
            }
        }
    }
    Ok(RunSummary { env_steps: arena.env_steps, rows: progress.rows, final_eval: last_eval })
}

/// Runs the estimator check over a grid of noise scales and sample counts,
/// writing `prop1.csv` into `out`.
pub fn prop1(sigmas: &[f64], counts: &[usize], seed: u64, form: Prop1Estimator, out: &Path) -> Result<Vec<harness::Prop1Result>> {
    if sigmas.is_empty() || counts.is_empty() {
        return invalid("need at least one sigma and one sample count");
    }
    let problem = Prop1Problem::scalar_example();
    let mut text = String::from("sigma,N,es_mean,analytic,rel_err,stderr\n");
    let mut results = Vec::new();
    for (i, &s) in sigmas.iter().enumerate() {
        for (j, &n) in counts.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::rollout::mix64(seed ^ crate::rollout::mix64(((i as u64) << 32) | j as u64)));
            let r = harness::prop1_check(&problem, s, n, form, &mut rng)?;
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                fmt_sig9(s),
                n,
                fmt_sig9(r.es_estimate),
                fmt_sig9(r.analytic),
                fmt_sig9(r.error),
                fmt_sig9(r.stderr)
            );
            results.push(r);
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("prop1.csv"), text)?;
    Ok(results)
}

/// A parsed `progress.csv` plus the task recorded in its `config.txt`.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub dir: PathBuf,
    pub task: String,
    pub ticks: Vec<u64>,
    pub eval: Vec<f64>,
}

pub fn read_run(dir: &Path) -> Result<RunLog> {
    let cfg = parse_config_text(&fs::read_to_string(dir.join("config.txt"))?)?;
    let task = cfg.get("env").cloned().unwrap_or_else(|| "pendulum".into());
    let text = fs::read_to_string(dir.join("progress.csv"))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let (Some(si), Some(ei)) = (header.iter().position(|h| *h == "step"), header.iter().position(|h| *h == "eval_return")) else {
        return invalid(format!("{}: progress.csv lacks step/eval_return columns", dir.display()));
    };
    let mut log = RunLog { dir: dir.to_path_buf(), task, ticks: vec![], eval: vec![] };
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("{}: malformed progress row '{line}'", dir.display()));
        log.ticks.push(cols.get(si).and_then(|v| v.parse().ok()).ok_or_else(bad)?);
        log.eval.push(cols.get(ei).and_then(|v| v.parse().ok()).ok_or_else(bad)?);
    }
    Ok(log)
}

/// Builds the score table from labelled run directories (runs sharing a
/// label and task are averaged) and writes `stats.csv` into `out`.
pub fn stats(runs: &[(String, PathBuf)], anchors_text: &str, out: &Path) -> Result<Vec<harness::AlgoCurves>> {
    if runs.is_empty() {
        return invalid("no runs given");
    }
    let anchors = parse_anchors(anchors_text)?;
    let logs: Vec<(String, RunLog)> = runs.iter().map(|(l, d)| Ok((l.clone(), read_run(d)?))).collect::<Result<_>>()?;
    let reference = &logs[0].1.ticks;
    let ragged: Vec<String> = logs.iter().filter(|(_, r)| &r.ticks != reference || r.ticks.is_empty()).map(|(_, r)| r.dir.display().to_string()).collect();
    if !ragged.is_empty() {
        return invalid(format!("tick mismatch in: {}", ragged.join(", ")));
    }
    let mut algos: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    for (l, r) in &logs {
        if !algos.contains(l) {
            algos.push(l.clone());
        }
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
    }
    let ticks = reference.len();
    let mut returns = vec![vec![vec![0.0; ticks]; tasks.len()]; algos.len()];
    let mut counts = vec![vec![0usize; tasks.len()]; algos.len()];
    for (l, r) in &logs {
        let i = algos.iter().position(|a| a == l).expect("label");
        let j = tasks.iter().position(|t| *t == r.task).expect("task");
        for (acc, v) in returns[i][j].iter_mut().zip(&r.eval) {
            *acc += v;
        }
        counts[i][j] += 1;
    }
    let mut missing = Vec::new();
    for (i, a) in algos.iter().enumerate() {
        for (j, t) in tasks.iter().enumerate() {
            if counts[i][j] == 0 {
                missing.push(format!("{a}/{t}"));
            }
            returns[i][j].iter_mut().for_each(|v| *v /= counts[i][j].max(1) as f64);
        }
    }
    if !missing.is_empty() {
        return invalid(format!("missing runs for: {}", missing.join(", ")));
    }
    let mut low = Vec::new();
    let mut high = Vec::new();
    for t in &tasks {
        let a = anchors.iter().find(|a| &a.task == t).ok_or_else(|| Error::InvalidArgument(format!("no anchors for task '{t}'")))?;
        low.push(a.low);
        high.push(a.high);
    }
    let tick_steps = if ticks > 1 { reference[1] - reference[0] } else { reference[0] };
    let table = ScoreTable::from_returns(algos, tasks, &returns, low, high, tick_steps)?;
    let curves = aggregate_stats(&table)?;
    let mut text = String::from("tick,algo,mean,median,best_ratio\n");
    for (t, tick) in reference.iter().enumerate() {
        for c in &curves {
            let _ = writeln!(text, "{tick},{},{},{},{}", c.algo, fmt_sig9(c.mean[t]), fmt_sig9(c.median[t]), fmt_sig9(c.best_ratio[t]));
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("stats.csv"), text)?;
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(-1234.567891234), "-1234.56789");
        assert_eq!(fmt_sig9(1e-3), "0.001");
        assert_eq!(fmt_sig9(123456789012.0), "123456789000");
        assert_eq!(fmt_sig9(0.1 + 0.2), "0.3");
        assert_eq!(fmt_sig9(f64::NAN), "nan");
        assert_eq!(fmt_sig9(2.5e-7), "0.00000025");
    }

    #[test]
    fn config_defaults_and_overrides() {
        let map = parse_config_text("algo=oht-es-discrete # comment\ntuner.support=1,2,3\n\nsteps=5000\n").unwrap();
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.tuner_n, 6);
        assert_eq!(cfg.tuner_support, vec![1, 2, 3]);
        assert_eq!(cfg.hidden, vec![300, 300]);
        assert_eq!(cfg.seeds, SeedPlan::from_master(0));
        let again = RunConfig::from_map(&parse_config_text(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn config_errors() {
        assert!(parse_config_text("nope=1").is_err());
        assert!(parse_config_text("just text").is_err());
        let bad = |s: &str| RunConfig::from_map(&parse_config_text(s).unwrap()).is_err();
        assert!(bad("algo=sarsa"));
        assert!(bad("env=cartpole"));
        assert!(bad("delay=0"));
        assert!(bad("steps=10\nwarmup=100"));
        assert!(bad("algo=td3\ntuner.mode=cem"));
        assert!(bad("td3.gamma=abc"));
        assert!(bad("algo=oht-es-cem\ntuner.N=3"));
    }

    #[test]
    fn tuner_seed_leaves_env_seed() {
        let a = RunConfig::from_map(&parse_config_text("seed=4").unwrap()).unwrap();
        let b = RunConfig::from_map(&parse_config_text("seed=4\nseed.tuner=99").unwrap()).unwrap();
        assert_eq!(a.seeds.env, b.seeds.env);
        assert_ne!(a.seeds.tuner, b.seeds.tuner);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    }
}
