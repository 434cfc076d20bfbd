//! C ABI over the `oht-es` library.
//!
//! Every function returns an [`OhtStatus`]; on failure the message can be
//! fetched with [`oht_last_error`]. Objects are opaque handles created by a
//! `*_new`/`*_load` function and released with the matching `*_free`.
//! Output arrays are caller-allocated and their lengths are checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};

use oht_es::envs::{make_env, Env};
use oht_es::harness::{self, Prop1Estimator, Prop1Problem};
use oht_es::net::{Mlp, OutputActivation};
use oht_es::tuners::{CategoricalTuner, FitnessRecord, GaussianMode, GaussianTuner};
use oht_es::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OhtStatus {
    Ok = 0,
    InvalidArgument = 1,
    Numeric = 2,
    Unavailable = 3,
    Logic = 4,
    Io = 5,
    NullPointer = 6,
    Panic = 7,
}

/// Update rule of a Gaussian tuner.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OhtGaussianMode {
    EsGradient = 0,
    Cem = 1,
}

/// An environment instance.
pub struct OhtEnv {
    inner: Box<dyn Env>,
}

/// Gaussian tuner over log10 learning rates, with its own generator.
pub struct OhtGaussianTuner {
    inner: GaussianTuner,
    rng: ChaCha8Rng,
}

/// Categorical tuner over a discrete support, with its own generator.
pub struct OhtCategoricalTuner {
    inner: CategoricalTuner,
    rng: ChaCha8Rng,
}

/// A deterministic policy restored from a run checkpoint.
pub struct OhtPolicy {
    actor: Mlp<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Invalid(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OhtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OhtStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OhtStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            OhtStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            let code = match &e {
                Error::InvalidArgument(_) => OhtStatus::InvalidArgument,
                Error::Numeric(_) => OhtStatus::Numeric,
                Error::Unavailable(_) => OhtStatus::Unavailable,
                Error::Logic(_) => OhtStatus::Logic,
                Error::Io(_) => OhtStatus::Io,
            };
            set_error(e.to_string());
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            OhtStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    p.write(v);
    Ok(())
}

fn need(len: usize, want: usize, what: &str) -> Result<(), Failure> {
    if len != want {
        return Err(Failure::Invalid(format!("{what} has length {len}, expected {want}")));
    }
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn oht_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates `name` ("pendulum" or "pointmass"); `delay > 1` accumulates
/// rewards over that many steps.
#[no_mangle]
pub unsafe extern "C" fn oht_env_new(name: *const c_char, delay: usize, out: *mut *mut OhtEnv) -> OhtStatus {
    guard(|| {
        let name = string(name, "name")?;
        let env = make_env(&name, delay)?;
        put(out, Box::into_raw(Box::new(OhtEnv { inner: env })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn oht_env_free(env: *mut OhtEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

#[no_mangle]
pub unsafe extern "C" fn oht_env_dims(env: *const OhtEnv, obs_dim: *mut usize, act_dim: *mut usize) -> OhtStatus {
    guard(|| {
        let spec = obj(env, "env")?.inner.spec();
        put(obs_dim, spec.obs_dim, "obs_dim")?;
        put(act_dim, spec.act_dim, "act_dim")
    })
}

/// Starts an episode and writes the first observation.
#[no_mangle]
pub unsafe extern "C" fn oht_env_reset(env: *mut OhtEnv, seed: u64, obs: *mut f64, obs_len: usize) -> OhtStatus {
    guard(|| {
        let env = obj_mut(env, "env")?;
        need(obs_len, env.inner.spec().obs_dim, "obs")?;
        let out = slice_mut(obs, obs_len, "obs")?;
        out.copy_from_slice(&env.inner.reset(seed));
        Ok(())
    })
}

/// Advances one step. `done` ends the episode; `terminal` marks a true
/// terminal state (not a time limit).
#[no_mangle]
pub unsafe extern "C" fn oht_env_step(
    env: *mut OhtEnv,
    action: *const f64,
    act_len: usize,
    obs: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    done: *mut bool,
    terminal: *mut bool,
) -> OhtStatus {
    guard(|| {
        let env = obj_mut(env, "env")?;
        need(obs_len, env.inner.spec().obs_dim, "obs")?;
        let action = slice(action, act_len, "action")?;
        let step = env.inner.step(action)?;
        slice_mut(obs, obs_len, "obs")?.copy_from_slice(&step.obs);
        put(reward, step.reward, "reward")?;
        put(done, step.done, "done")?;
        put(terminal, step.terminal, "terminal")
    })
}

/// Gaussian tuner with `dim` dimensions and population `n`.
#[no_mangle]
pub unsafe extern "C" fn oht_gaussian_tuner_new(
    mu: *const f64,
    sigma: *const f64,
    dim: usize,
    beta: f64,
    n: usize,
    mode: OhtGaussianMode,
    seed: u64,
    out: *mut *mut OhtGaussianTuner,
) -> OhtStatus {
    guard(|| {
        let mu = slice(mu, dim, "mu")?.to_vec();
        let sigma = slice(sigma, dim, "sigma")?.to_vec();
        let mode = match mode {
            OhtGaussianMode::EsGradient => GaussianMode::EsGradient,
            OhtGaussianMode::Cem => GaussianMode::Cem,
        };
        let inner = GaussianTuner::new(mu, sigma, beta, n, mode)?;
        let t = OhtGaussianTuner { inner, rng: ChaCha8Rng::seed_from_u64(seed) };
        put(out, Box::into_raw(Box::new(t)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn oht_gaussian_tuner_free(t: *mut OhtGaussianTuner) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Turns fitness standardization on or off (on by default).
#[no_mangle]
pub unsafe extern "C" fn oht_gaussian_tuner_set_standardize(t: *mut OhtGaussianTuner, on: bool) -> OhtStatus {
    guard(|| {
        obj_mut(t, "tuner")?.inner.standardize = on;
        Ok(())
    })
}

/// Writes `n × dim` samples, row-major, into `etas`.
#[no_mangle]
pub unsafe extern "C" fn oht_gaussian_tuner_sample(t: *mut OhtGaussianTuner, etas: *mut f64, len: usize) -> OhtStatus {
    guard(|| {
        let t = obj_mut(t, "tuner")?;
        need(len, t.inner.n * t.inner.dim(), "etas")?;
        let out = slice_mut(etas, len, "etas")?;
        let s = t.inner.sample(&mut t.rng);
        for (row, eta) in out.chunks_exact_mut(t.inner.dim()).zip(&s.etas) {
            row.copy_from_slice(eta);
        }
        Ok(())
    })
}

/// Updates the distribution from `count` samples (row-major `count × dim`)
/// and their fitness values.
#[no_mangle]
pub unsafe extern "C" fn oht_gaussian_tuner_update(
    t: *mut OhtGaussianTuner,
    etas: *const f64,
    fitness: *const f64,
    count: usize,
) -> OhtStatus {
    guard(|| {
        let t = obj_mut(t, "tuner")?;
        let dim = t.inner.dim();
        let etas = slice(etas, count * dim, "etas")?;
        let fitness = slice(fitness, count, "fitness")?;
        let records: Vec<_> = etas
            .chunks_exact(dim)
            .zip(fitness)
            .enumerate()
            .map(|(j, (e, &f))| FitnessRecord { eta: e.to_vec(), fitness: f, agent_index: j })
            .collect();
        t.inner.update(&records)?;
        Ok(())
    })
}

/// Current mean and standard deviation, `dim` entries each.
#[no_mangle]
pub unsafe extern "C" fn oht_gaussian_tuner_state(
    t: *const OhtGaussianTuner,
    mu: *mut f64,
    sigma: *mut f64,
    dim: usize,
) -> OhtStatus {
    guard(|| {
        let t = obj(t, "tuner")?;
        need(dim, t.inner.dim(), "state arrays")?;
        slice_mut(mu, dim, "mu")?.copy_from_slice(&t.inner.mu);
        slice_mut(sigma, dim, "sigma")?.copy_from_slice(&t.inner.sigma);
        Ok(())
    })
}

/// Categorical tuner over `support` (`k` values), `n` samples per update.
#[no_mangle]
pub unsafe extern "C" fn oht_categorical_tuner_new(
    support: *const usize,
    k: usize,
    epsilon: f64,
    n: usize,
    beta: f64,
    seed: u64,
    out: *mut *mut OhtCategoricalTuner,
) -> OhtStatus {
    guard(|| {
        let support = slice(support, k, "support")?.to_vec();
        let inner = CategoricalTuner::new(support, epsilon, n, beta)?;
        let t = OhtCategoricalTuner { inner, rng: ChaCha8Rng::seed_from_u64(seed) };
        put(out, Box::into_raw(Box::new(t)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn oht_categorical_tuner_free(t: *mut OhtCategoricalTuner) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

#[no_mangle]
pub unsafe extern "C" fn oht_categorical_tuner_set_standardize(t: *mut OhtCategoricalTuner, on: bool) -> OhtStatus {
    guard(|| {
        obj_mut(t, "tuner")?.inner.standardize = on;
        Ok(())
    })
}

/// Draws one support index.
#[no_mangle]
pub unsafe extern "C" fn oht_categorical_tuner_sample(t: *mut OhtCategoricalTuner, index: *mut usize) -> OhtStatus {
    guard(|| {
        let t = obj_mut(t, "tuner")?;
        let i = t.inner.sample(&mut t.rng);
        put(index, i, "index")
    })
}

/// Score-function update from exactly `n` (index, fitness) pairs.
#[no_mangle]
pub unsafe extern "C" fn oht_categorical_tuner_update(
    t: *mut OhtCategoricalTuner,
    indices: *const usize,
    fitness: *const f64,
    count: usize,
) -> OhtStatus {
    guard(|| {
        let t = obj_mut(t, "tuner")?;
        let idx = slice(indices, count, "indices")?;
        let fit = slice(fitness, count, "fitness")?;
        let records: Vec<_> =
            idx.iter().zip(fit).map(|(&i, &f)| FitnessRecord { eta: i, fitness: f, agent_index: i }).collect();
        t.inner.score_function_update(&records)?;
        Ok(())
    })
}

/// Softmax of the logits, `k` entries.
#[no_mangle]
pub unsafe extern "C" fn oht_categorical_tuner_probabilities(
    t: *const OhtCategoricalTuner,
    probs: *mut f64,
    k: usize,
) -> OhtStatus {
    guard(|| {
        let t = obj(t, "tuner")?;
        need(k, t.inner.k(), "probs")?;
        slice_mut(probs, k, "probs")?.copy_from_slice(&t.inner.probabilities());
        Ok(())
    })
}

/// Loads the actor from a run's `checkpoint.bin`; `env_name` supplies the
/// action bounds.
#[no_mangle]
pub unsafe extern "C" fn oht_policy_load(
    checkpoint: *const c_char,
    env_name: *const c_char,
    out: *mut *mut OhtPolicy,
) -> OhtStatus {
    guard(|| {
        let path = string(checkpoint, "checkpoint")?;
        let env = make_env(&string(env_name, "env_name")?, 1)?;
        let spec = env.spec();
        let head = OutputActivation::bounded(&spec.action_low, &spec.action_high);
        let actor = Mlp::read_snapshot(BufReader::new(File::open(path)?), head)?;
        if actor.input_dim() != spec.obs_dim || actor.output_dim() != spec.act_dim {
            return Err(Failure::Invalid("checkpoint does not match the environment".into()));
        }
        put(out, Box::into_raw(Box::new(OhtPolicy { actor })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn oht_policy_free(p: *mut OhtPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Deterministic action for one observation.
#[no_mangle]
pub unsafe extern "C" fn oht_policy_act(
    p: *const OhtPolicy,
    obs: *const f64,
    obs_len: usize,
    action: *mut f64,
    act_len: usize,
) -> OhtStatus {
    guard(|| {
        let p = obj(p, "policy")?;
        need(obs_len, p.actor.input_dim(), "obs")?;
        need(act_len, p.actor.output_dim(), "action")?;
        let x: Vec<f32> = slice(obs, obs_len, "obs")?.iter().map(|&v| v as f32).collect();
        let a = p.actor.forward(&x)?;
        for (o, v) in slice_mut(action, act_len, "action")?.iter_mut().zip(a) {
            *o = v as f64;
        }
        Ok(())
    })
}

/// `(ret − low) / (high − low)`.
#[no_mangle]
pub unsafe extern "C" fn oht_normalized_score(ret: f64, low: f64, high: f64, out: *mut f64) -> OhtStatus {
    guard(|| {
        let z = harness::normalized_score(ret, low, high)?;
        put(out, z, "out")
    })
}

/// ES estimate versus analytic value on the scalar quadratic problem
/// (`A=2, b=0, ψ=0, g=1, μ=1`). `error` is relative to the analytic value.
#[no_mangle]
pub unsafe extern "C" fn oht_prop1_check(
    sigma: f64,
    n: usize,
    seed: u64,
    antithetic: bool,
    estimate: *mut f64,
    analytic: *mut f64,
    error: *mut f64,
) -> OhtStatus {
    guard(|| {
        let form = if antithetic { Prop1Estimator::Antithetic } else { Prop1Estimator::Plain };
        let r = harness::prop1_check(&Prop1Problem::scalar_example(), sigma, n, form, &mut ChaCha8Rng::seed_from_u64(seed))?;
        put(estimate, r.es_estimate, "estimate")?;
        put(analytic, r.analytic, "analytic")?;
        put(error, r.error, "error")
    })
}
