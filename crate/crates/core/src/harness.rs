//! Evaluation and verification: deterministic policy evaluation, normalized
//! scores with cross-task statistics, and a numerical check that the ES
//! estimator of a hyper-parameter gradient matches the analytic chain rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::Env;
use crate::error::{invalid, Error, Result};
use crate::rollout::{run_episode, Policy};

/// Undiscounted returns of `episodes` noise-free episodes; episode `k`
/// resets with `seed + k`.
pub fn evaluate_returns<P: Policy + ?Sized>(policy: &P, env: &dyn Env, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    if episodes == 0 {
        return invalid("need at least one evaluation episode");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes as u64)
        .map(|k| {
            let mut env = env.box_clone();
            run_episode(policy, env.as_mut(), seed.wrapping_add(k), 0.0, &mut rng, k).map(|e| e.total_reward)
        })
        .collect()
}

/// Mean of [`evaluate_returns`].
pub fn evaluate_policy<P: Policy + ?Sized>(policy: &P, env: &dyn Env, episodes: usize, seed: u64) -> Result<f64> {
    let r = evaluate_returns(policy, env, episodes, seed)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// `(R − L) / (U − L)`, unclipped.
pub fn normalized_score(ret: f64, low: f64, high: f64) -> Result<f64> {
    if !(high > low) {
        return invalid(format!("score anchors need high > low (got low={low}, high={high})"));
    }
    Ok((ret - low) / (high - low))
}

/// Per-task score anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub task: String,
    pub low: f64,
    pub high: f64,
}

/// Anchors shipped with the crate.
pub const DEFAULT_ANCHORS: &str = include_str!("../data/anchors.csv");

/// Parses `task,low,high` lines (header and `#` comments allowed).
pub fn parse_anchors(text: &str) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("task,") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("anchors line {}: bad number '{s}'", i + 1)));
        if cols.len() != 3 {
            return invalid(format!("anchors line {}: expected task,low,high", i + 1));
        }
        let a = Anchor { task: cols[0].to_string(), low: parse(cols[1])?, high: parse(cols[2])? };
        normalized_score(0.0, a.low, a.high)?;
        out.push(a);
    }
    Ok(out)
}

pub fn anchor_for(task: &str) -> Result<Anchor> {
    parse_anchors(DEFAULT_ANCHORS)?
        .into_iter()
        .find(|a| a.task == task)
        .ok_or_else(|| Error::Unavailable(format!("no score anchors for task '{task}'")))
}

/// Normalized scores `z[algo][task][tick]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub algos: Vec<String>,
    pub tasks: Vec<String>,
    pub scores: Vec<Vec<Vec<f64>>>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub tick_steps: u64,
}

impl ScoreTable {
    /// Normalizes raw returns `returns[algo][task][tick]` with per-task anchors.
    pub fn from_returns(
        algos: Vec<String>,
        tasks: Vec<String>,
        returns: &[Vec<Vec<f64>>],
        low: Vec<f64>,
        high: Vec<f64>,
        tick_steps: u64,
    ) -> Result<Self> {
        if low.len() != tasks.len() || high.len() != tasks.len() {
            return invalid("one anchor pair per task is required");
        }
        let scores = returns
            .iter()
            .map(|per_task| {
                per_task
                    .iter()
                    .enumerate()
                    .map(|(j, ticks)| ticks.iter().map(|&r| normalized_score(r, low[j], high[j])).collect())
                    .collect()
            })
            .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
        let t = Self { algos, tasks, scores, low, high, tick_steps };
        t.validate()?;
        Ok(t)
    }

    pub fn num_ticks(&self) -> usize {
        self.scores.first().and_then(|a| a.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() || self.scores[0].is_empty() || self.num_ticks() == 0 {
            return invalid("score table is empty");
        }
        if self.algos.len() != self.scores.len() {
            return invalid("one name per algorithm is required");
        }
        let (m, ticks) = (self.scores[0].len(), self.num_ticks());
        if self.tasks.len() != m {
            return invalid("one name per task is required");
        }
        for per_task in &self.scores {
            if per_task.len() != m || per_task.iter().any(|t| t.len() != ticks) {
                return invalid("score table ticks are not aligned across algorithms and tasks");
            }
            if per_task.iter().flatten().any(|z| !z.is_finite()) {
                return invalid("score table contains non-finite cells");
            }
        }
        for (l, u) in self.low.iter().zip(&self.high) {
            normalized_score(0.0, *l, *u)?;
        }
        Ok(())
    }
}

/// Per-algorithm curves over ticks.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgoCurves {
    pub algo: String,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub best_ratio: Vec<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean and median over tasks, and the fraction of tasks on which each
/// algorithm scores best (ties share the credit equally), at every tick.
pub fn aggregate_stats(table: &ScoreTable) -> Result<Vec<AlgoCurves>> {
    table.validate()?;
    let (k, m, ticks) = (table.scores.len(), table.scores[0].len(), table.num_ticks());
    let mut curves: Vec<AlgoCurves> = table
        .algos
        .iter()
        .map(|a| AlgoCurves { algo: a.clone(), mean: vec![0.0; ticks], median: vec![0.0; ticks], best_ratio: vec![0.0; ticks] })
        .collect();
    for t in 0..ticks {
        for (i, c) in curves.iter_mut().enumerate() {
            let mut z: Vec<f64> = (0..m).map(|j| table.scores[i][j][t]).collect();
            c.mean[t] = z.iter().sum::<f64>() / m as f64;
            c.median[t] = median(&mut z);
        }
        for j in 0..m {
            let best = (0..k).map(|i| table.scores[i][j][t]).fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = (0..k).filter(|&i| table.scores[i][j][t] == best).collect();
            let share = 1.0 / (winners.len() as f64 * m as f64);
            for i in winners {
                curves[i].best_ratio[t] += share;
            }
        }
    }
    Ok(curves)
}

/// Synthetic setting for comparing the ES estimate of `d/dη L(ψ′(η))`
/// against the chain rule: `ψ′(η) = ψ_t + η·g`,
/// `L(ψ) = −½ ψᵀAψ + bᵀψ`, evaluated at `η = μ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Problem {
    /// Row-major `d × d`, symmetric positive-definite.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub psi: Vec<f64>,
    pub g: Vec<f64>,
    pub mu: f64,
}

impl Prop1Problem {
    /// The one-dimensional instance `A=2, b=0, ψ_t=0, g=1, μ_t=1`.
    pub fn scalar_example() -> Self {
        Self { a: vec![2.0], b: vec![0.0], psi: vec![0.0], g: vec![1.0], mu: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.a.len() != d * d || self.psi.len() != d || self.g.len() != d {
            return invalid("inconsistent problem dimensions");
        }
        for i in 0..d {
            for j in 0..i {
                if (self.a[i * d + j] - self.a[j * d + i]).abs() > 1e-12 * (1.0 + self.a[i * d + j].abs()) {
                    return invalid("A must be symmetric");
                }
            }
        }
        // Cholesky as the positive-definiteness test.
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
                if i == j {
                    let v = self.a[i * d + i] - s;
                    if !(v > 0.0) {
                        return invalid("A must be positive-definite");
                    }
                    l[i * d + i] = v.sqrt();
                } else {
                    l[i * d + j] = (self.a[i * d + j] - s) / l[j * d + j];
                }
            }
        }
        Ok(())
    }

    fn point(&self, eta: f64) -> Vec<f64> {
        self.psi.iter().zip(&self.g).map(|(p, g)| p + eta * g).collect()
    }

    fn a_times(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| self.a[i * d + j] * x[j]).sum()).collect()
    }

    pub fn objective(&self, psi: &[f64]) -> f64 {
        let ax = self.a_times(psi);
        -0.5 * psi.iter().zip(&ax).map(|(x, y)| x * y).sum::<f64>() + self.b.iter().zip(psi).map(|(b, x)| b * x).sum::<f64>()
    }

    /// `∇L(ψ) = −Aψ + b`.
    pub fn gradient(&self, psi: &[f64]) -> Vec<f64> {
        self.a_times(psi).iter().zip(&self.b).map(|(ax, b)| b - ax).collect()
    }

    /// `∇L(ψ_t + η g) · g`.
    pub fn directional(&self, eta: f64) -> f64 {
        self.gradient(&self.point(eta)).iter().zip(&self.g).map(|(a, b)| a * b).sum()
    }

    /// Chain-rule value at `η = μ_t`.
    pub fn analytic(&self) -> f64 {
        self.directional(self.mu)
    }

    pub fn meta_objective(&self, eta: f64) -> f64 {
        self.objective(&self.point(eta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prop1Estimator {
    /// `(1/(σN)) Σ L(μ + σε_j) ε_j`.
    Plain,
    /// Mirrored pairs `±ε_j`: `(1/(σN)) Σ_pairs (L(μ+σε) − L(μ−σε)) ε`.
    Antithetic,
}

/// Estimate and its standard error (over independent draws or pairs).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

fn mean_and_stderr(contrib: impl ExactSizeIterator<Item = f64>) -> Estimate {
    let n = contrib.len() as f64;
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, x) in contrib.enumerate() {
        let delta = x - mean;
        mean += delta / (i as f64 + 1.0);
        m2 += delta * (x - mean);
    }
    let var = if n > 1.0 { m2 / (n - 1.0) } else { 0.0 };
    Estimate { value: mean, stderr: (var / n).sqrt() }
}

/// ES (score-function) estimate from given standard-normal draws. For the
/// antithetic form each draw stands for a mirrored pair, so `noise.len()`
/// pairs cost `2·noise.len()` evaluations.
pub fn es_estimate(p: &Prop1Problem, sigma: f64, noise: &[f64], form: Prop1Estimator) -> Estimate {
    match form {
        Prop1Estimator::Plain => mean_and_stderr(noise.iter().map(|&e| p.meta_objective(p.mu + sigma * e) * e / sigma)),
        Prop1Estimator::Antithetic => mean_and_stderr(
            noise
                .iter()
                .map(|&e| (p.meta_objective(p.mu + sigma * e) - p.meta_objective(p.mu - sigma * e)) * e / (2.0 * sigma)),
        ),
    }
}

/// Reparameterized estimate `(1/N) Σ ∇L(ψ_t + (μ + σε_j) g) · g`.
pub fn reparam_estimate(p: &Prop1Problem, sigma: f64, noise: &[f64]) -> Estimate {
    mean_and_stderr(noise.iter().map(|&e| p.directional(p.mu + sigma * e)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop1Result {
    pub es_estimate: f64,
    pub stderr: f64,
    pub analytic: f64,
    /// Relative error, or the absolute error when `absolute` is set.
    pub error: f64,
    /// The analytic value is (numerically) zero, so `error` is absolute.
    pub absolute: bool,
}

/// Compare the ES estimate from `n` function evaluations at noise scale
/// `sigma` with the analytic chain-rule value.
pub fn prop1_check(
    p: &Prop1Problem,
    sigma: f64,
    n: usize,
    form: Prop1Estimator,
    rng: &mut ChaCha8Rng,
) -> Result<Prop1Result> {
    p.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid("sigma must be positive");
    }
    let draws = match form {
        Prop1Estimator::Plain => n,
        Prop1Estimator::Antithetic => n / 2,
    };
    if draws == 0 {
        return invalid("sample count too small for the chosen estimator");
    }
    let noise: Vec<f64> = (0..draws).map(|_| StandardNormal.sample(rng)).collect();
    let est = es_estimate(p, sigma, &noise, form);
    let analytic = p.analytic();
    let scale = p.g.iter().map(|g| g * g).sum::<f64>().sqrt() * p.a.iter().map(|a| a.abs()).fold(1.0, f64::max);
    let absolute = analytic.abs() <= 1e-12 * scale;
    let err = (est.value - analytic).abs();
    Ok(Prop1Result {
        es_estimate: est.value,
        stderr: est.stderr,
        analytic,
        error: if absolute { err } else { err / analytic.abs() },
        absolute,
    })
}

/// Average of `reps` estimates per noise scale, every scale reusing the same
/// standard-normal draws. Returns `|mean − analytic|` for each scale.
pub fn bias_by_sigma(
    p: &Prop1Problem,
    sigmas: &[f64],
    n: usize,
    reps: usize,
    form: Prop1Estimator,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    p.validate()?;
    if n == 0 || reps == 0 {
        return invalid("need at least one sample and one repetition");
    }
    let batches: Vec<Vec<f64>> = (0..reps).map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect()).collect();
    let analytic = p.analytic();
    Ok(sigmas
        .iter()
        .map(|&s| {
            let mean = batches.iter().map(|b| es_estimate(p, s, b, form).value).sum::<f64>() / reps as f64;
            (mean - analytic).abs()
        })
        .collect())
}
