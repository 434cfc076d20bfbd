//! Dense multilayer perceptrons with an exact backward pass, Adam and Polyak
//! averaging.
//!
//! Parameters of a network live in one flat vector laid out layer by layer:
//! the `fan_in × fan_out` weight matrix (row-major) followed by the `fan_out`
//! bias vector. Optimizers, target averaging and the parameter-space CEM all
//! operate on that flat view.
//!
//! The engine is generic over the scalar type. Training uses `f32`; the
//! gradient checks instantiate the same code with `f64`.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Floating point types the engine can run on.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// `c ← alpha·op(a)·op(b) + beta·c` on raw strided buffers.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, with `c` not aliasing `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix operand for [`gemm`].
#[derive(Clone, Copy)]
struct Operand<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, T> Operand<'a, T> {
    fn plain(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    /// `data` holds a `rows × cols` matrix; the operand is its transpose.
    fn transpose_of(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: true }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out ← a·b + beta·out`, `out` row-major.
fn gemm<T: Scalar>(a: Operand<'_, T>, b: Operand<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and lengths are checked above; `out` is a distinct
    // mutable borrow so it cannot alias the inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Activation applied to the last layer.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputActivation<T> {
    Identity,
    /// `center + half_range · tanh(z)` per output coordinate; keeps actions
    /// inside a box.
    Tanh { center: Vec<T>, half_range: Vec<T> },
}

impl<T: Scalar> OutputActivation<T> {
    /// Tanh head mapping onto the box `[low, high]`.
    pub fn bounded(low: &[f64], high: &[f64]) -> Self {
        OutputActivation::Tanh {
            center: low.iter().zip(high).map(|(l, h)| T::of(0.5 * (l + h))).collect(),
            half_range: low.iter().zip(high).map(|(l, h)| T::of(0.5 * (h - l))).collect(),
        }
    }

    fn cast<U: Scalar>(&self) -> OutputActivation<U> {
        match self {
            OutputActivation::Identity => OutputActivation::Identity,
            OutputActivation::Tanh { center, half_range } => OutputActivation::Tanh {
                center: center.iter().map(|x| U::of(x.as_f64())).collect(),
                half_range: half_range.iter().map(|x| U::of(x.as_f64())).collect(),
            },
        }
    }
}

/// Weights and biases of a dense network with rectifier hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    sizes: Vec<usize>,
    params: Vec<T>,
    output: OutputActivation<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    batch: usize,
    inputs: Vec<T>,
    /// Post-activation values of each hidden layer.
    hidden: Vec<Vec<T>>,
    /// `tanh(z)` of the output layer when the head is bounded.
    squashed: Option<Vec<T>>,
    output: Vec<T>,
}

impl<T> Forward<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn into_output(self) -> Vec<T> {
        self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients of `Σ_batch ⟨upstream, output⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<T>,
    /// `batch × input_dim`, row-major.
    pub inputs: Vec<T>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return invalid(format!("need at least two layer sizes, got {sizes:?}"));
    }
    if sizes.iter().any(|&s| s == 0) {
        return invalid(format!("layer sizes must be positive, got {sizes:?}"));
    }
    Ok(())
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn all_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl<T: Scalar> Mlp<T> {
    /// Fan-in uniform initialization: weights `U(−1/√fan_in, 1/√fan_in)`,
    /// biases zero. Draws are made in `f64` so the same seed gives the same
    /// network (up to rounding) for every scalar type.
    pub fn new(sizes: &[usize], output: OutputActivation<T>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in 0..net.num_layers() {
            let bound = 1.0 / (sizes[layer] as f64).sqrt();
            for w in net.weights_mut(layer) {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation<T>) -> Result<Self> {
        check_sizes(sizes)?;
        let out_dim = *sizes.last().unwrap();
        if let OutputActivation::Tanh { center, half_range } = &output {
            if center.len() != out_dim || half_range.len() != out_dim {
                return invalid("tanh head bounds must match the output width");
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); param_count(sizes)],
            output,
        })
    }

    /// Rebuild a network from a flat parameter vector.
    pub fn from_params(sizes: &[usize], output: OutputActivation<T>, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        if params.len() != net.params.len() {
            return invalid(format!(
                "expected {} parameters for {sizes:?}, got {}",
                net.params.len(),
                params.len()
            ));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn output_activation(&self) -> &OutputActivation<T> {
        &self.output
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    fn layer_span(&self, layer: usize) -> (usize, usize, usize) {
        let start = self.layer_offset(layer);
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        (start, start + fan_in * fan_out, start + fan_in * fan_out + fan_out)
    }

    /// Weight matrix of `layer`, `fan_in × fan_out` row-major.
    pub fn weights(&self, layer: usize) -> &[T] {
        let (w, b, _) = self.layer_span(layer);
        &self.params[w..b]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let (w, b, _) = self.layer_span(layer);
        &mut self.params[w..b]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let (_, b, end) = self.layer_span(layer);
        &self.params[b..end]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let (_, b, end) = self.layer_span(layer);
        &mut self.params[b..end]
    }

    /// Convert to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            sizes: self.sizes.clone(),
            params: self.params.iter().map(|x| U::of(x.as_f64())).collect(),
            output: self.output.cast(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.sizes == other.sizes
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(input, 1)?.into_output())
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, inputs: &[T], batch: usize) -> Result<Forward<T>> {
        if inputs.len() != batch * self.input_dim() {
            return invalid(format!(
                "input has {} values, expected {batch} × {}",
                inputs.len(),
                self.input_dim()
            ));
        }
        let mut hidden = Vec::with_capacity(self.num_layers() - 1);
        let mut current: &[T] = inputs;
        let mut z = Vec::new();
        for layer in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            z = vec![T::zero(); batch * fan_out];
            for row in z.chunks_exact_mut(fan_out) {
                row.copy_from_slice(self.bias(layer));
            }
            gemm(
                Operand::plain(current, batch, fan_in),
                Operand::plain(self.weights(layer), fan_in, fan_out),
                T::one(),
                &mut z,
            );
            if layer + 1 < self.num_layers() {
                for v in z.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                hidden.push(std::mem::take(&mut z));
                current = hidden.last().unwrap();
            }
        }
        let (squashed, output) = match &self.output {
            OutputActivation::Identity => (None, z),
            OutputActivation::Tanh { center, half_range } => {
                let t: Vec<T> = z.iter().map(|v| v.tanh()).collect();
                let out_dim = center.len();
                let out = t
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| center[i % out_dim] + half_range[i % out_dim] * t)
                    .collect();
                (Some(t), out)
            }
        };
        if !all_finite(&output) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(Forward { batch, inputs: inputs.to_vec(), hidden, squashed, output })
    }

    /// Exact gradients of `Σ_batch ⟨upstream, output⟩` for a cached forward pass.
    pub fn backward(&self, fwd: &Forward<T>, upstream: &[T]) -> Result<Gradients<T>> {
        let batch = fwd.batch;
        let out_dim = self.output_dim();
        if upstream.len() != batch * out_dim {
            return invalid(format!(
                "upstream has {} values, expected {batch} × {out_dim}",
                upstream.len()
            ));
        }
        let mut delta: Vec<T> = match (&self.output, &fwd.squashed) {
            (OutputActivation::Tanh { half_range, .. }, Some(t)) => upstream
                .iter()
                .zip(t)
                .enumerate()
                .map(|(i, (&g, &t))| g * half_range[i % out_dim] * (T::one() - t * t))
                .collect(),
            _ => upstream.to_vec(),
        };

        let mut grads = vec![T::zero(); self.params.len()];
        for layer in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let input: &[T] = if layer == 0 { &fwd.inputs } else { &fwd.hidden[layer - 1] };
            let (w, b, end) = self.layer_span(layer);

            gemm(
                Operand::transpose_of(input, batch, fan_in),
                Operand::plain(&delta, batch, fan_out),
                T::zero(),
                &mut grads[w..b],
            );
            let mut bias_acc = vec![0.0f64; fan_out];
            for row in delta.chunks_exact(fan_out) {
                for (acc, d) in bias_acc.iter_mut().zip(row) {
                    *acc += d.as_f64();
                }
            }
            for (g, acc) in grads[b..end].iter_mut().zip(bias_acc) {
                *g = T::of(acc);
            }

            let mut dx = vec![T::zero(); batch * fan_in];
            gemm(
                Operand::plain(&delta, batch, fan_out),
                Operand::transpose_of(self.weights(layer), fan_in, fan_out),
                T::zero(),
                &mut dx,
            );
            if layer > 0 {
                for (d, a) in dx.iter_mut().zip(input) {
                    if *a <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            delta = dx;
        }
        if !all_finite(&grads) || !all_finite(&delta) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(Gradients { params: grads, inputs: delta })
    }

    /// Forward and backward in one call.
    pub fn gradients(&self, inputs: &[T], upstream: &[T], batch: usize) -> Result<Gradients<T>> {
        let fwd = self.forward_batch(inputs, batch)?;
        self.backward(&fwd, upstream)
    }
}

impl Mlp<f32> {
    /// Serialize as `u32` layer count, `u32` layer sizes, then the flat `f32`
    /// parameters, all little-endian.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`Mlp::write_snapshot`]. The head is not part of the format
    /// and must be supplied by the caller.
    pub fn read_snapshot<R: Read>(mut input: R, output: OutputActivation<f32>) -> Result<Self> {
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        if !(2..=64).contains(&count) {
            return invalid(format!("implausible layer count {count} in snapshot"));
        }
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut word)?;
            sizes.push(u32::from_le_bytes(word) as usize);
        }
        check_sizes(&sizes)?;
        let mut params = Vec::with_capacity(param_count(&sizes));
        for _ in 0..param_count(&sizes) {
            input.read_exact(&mut word)?;
            params.push(f32::from_le_bytes(word));
        }
        if !all_finite(&params) {
            return Err(Error::Numeric("snapshot holds non-finite parameters".into()));
        }
        Self::from_params(&sizes, output, params)
    }
}

/// Adam moments and constants for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with β₁=0.9, β₂=0.999, ε=1e-8.
    pub fn new(len: usize) -> Self {
        Self::with_constants(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0, beta1, beta2, eps }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam descent step, `params ← params − lr·m̂/(√v̂ + ε)`.
///
/// Non-finite gradients are rejected before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return invalid(format!(
            "adam shapes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.len()
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return invalid(format!("learning rate must be finite and non-negative, got {lr}"));
    }
    if !all_finite(grads) {
        return Err(Error::Numeric("non-finite gradient passed to adam".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 / (1.0 - state.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - state.beta2.powi(t)));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `target ← (1−rho)·target + rho·online`, elementwise.
pub fn polyak_update<T: Scalar>(target: &mut Mlp<T>, online: &Mlp<T>, rho: f64) -> Result<()> {
    if !target.same_shape(online) {
        return invalid("polyak update between networks of different shapes");
    }
    if !(0.0..=1.0).contains(&rho) {
        return invalid(format!("polyak coefficient must lie in [0, 1], got {rho}"));
    }
    let keep = T::of(1.0 - rho);
    let take = T::of(rho);
    for (t, &o) in target.params.iter_mut().zip(&online.params) {
        *t = keep * *t + take * o;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(net: &Mlp<f64>, inputs: &[f64], upstream: &[f64], batch: usize) -> f64 {
        let grads = net.gradients(inputs, upstream, batch).unwrap();
        let objective = |n: &Mlp<f64>, x: &[f64]| -> f64 {
            let out = n.forward_batch(x, batch).unwrap().into_output();
            out.iter().zip(upstream).map(|(o, u)| o * u).sum()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        for i in 0..net.num_params() {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = objective(&probe, inputs);
            probe.params[i] = orig - h;
            let down = objective(&probe, inputs);
            probe.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grads.params[i]).abs() / fd.abs().max(grads.params[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        let mut x = inputs.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = objective(net, &x);
            x[i] = orig - h;
            let down = objective(net, &x);
            x[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grads.inputs[i]).abs() / fd.abs().max(grads.inputs[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn parameter_count_of_critic_shape() {
        let net = Mlp::<f32>::new(&[3, 300, 300, 1], OutputActivation::Identity, 0).unwrap();
        assert_eq!(net.num_params(), 3 * 300 + 300 + 300 * 300 + 300 + 300 + 1);
        assert_eq!(net.num_params(), 91_801);
        // Pendulum critic: three observation inputs plus one action.
        let critic = Mlp::<f32>::zeros(&[4, 300, 300, 1], OutputActivation::Identity).unwrap();
        assert_eq!(critic.num_params(), 92_101);
    }

    #[test]
    fn rejects_bad_sizes() {
        for sizes in [vec![], vec![3], vec![3, 0, 1]] {
            assert!(matches!(
                Mlp::<f32>::new(&sizes, OutputActivation::Identity, 0),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = Mlp::<f32>::new(&[2, 2], OutputActivation::Identity, 7).unwrap();
        net.weights_mut(0).fill(0.0);
        assert_eq!(net.forward(&[3.0, -4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let a = Mlp::<f32>::new(&[4, 16, 2], OutputActivation::Identity, 11).unwrap();
        let b = Mlp::<f32>::new(&[4, 16, 2], OutputActivation::Identity, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.weights(0).iter().all(|w| w.abs() <= 0.5));
        assert!(a.weights(1).iter().all(|w| w.abs() <= 0.25));
        assert!(a.bias(0).iter().all(|&b| b == 0.0));
        let c = Mlp::<f32>::new(&[4, 16, 2], OutputActivation::Identity, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_linear_layer() {
        let net = Mlp::<f64>::from_params(&[1, 1], OutputActivation::Identity, vec![2.0, 1.0]).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::<f32>::new(&[3, 4, 1], OutputActivation::Identity, 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::InvalidArgument(_))));
        let fwd = net.forward_batch(&[0.0; 6], 2).unwrap();
        assert!(matches!(net.backward(&fwd, &[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tanh_head_stays_in_box() {
        let mut net =
            Mlp::<f32>::new(&[3, 8, 1], OutputActivation::bounded(&[-2.0], &[2.0]), 3).unwrap();
        for w in net.params_mut() {
            *w *= 50.0;
        }
        for x in [-100.0f32, -1.0, 0.0, 5.0, 1e4] {
            let y = net.forward(&[x, -x, 0.5 * x]).unwrap()[0];
            assert!((-2.0..=2.0).contains(&y), "{y}");
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = Mlp::<f64>::new(&[3, 5, 2], OutputActivation::Identity, 1).unwrap();
        let g = net.gradients(&[0.3, -0.1, 0.9], &[0.0, 0.0], 1).unwrap();
        assert!(g.params.iter().all(|&x| x == 0.0));
        assert!(g.inputs.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicated_sample_doubles_linear_gradient() {
        let net = Mlp::<f64>::new(&[2, 3], OutputActivation::Identity, 5).unwrap();
        let x = [0.4, -1.3];
        let up = [1.0, -0.5, 2.0];
        let one = net.gradients(&x, &up, 1).unwrap();
        let two = net
            .gradients(&[x, x].concat(), &[up, up].concat(), 2)
            .unwrap();
        for (a, b) in one.params.iter().zip(&two.params) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (seed, sizes, bounded) in [
            (1, vec![3, 7, 6, 1], false),
            (2, vec![4, 5, 5, 2], true),
            (3, vec![2, 9, 1], false),
        ] {
            let head = if bounded {
                OutputActivation::bounded(&[-1.0, -2.0], &[1.0, 2.0])
            } else {
                OutputActivation::Identity
            };
            let net = Mlp::<f64>::new(&sizes, head, seed).unwrap();
            let batch = 3;
            let inputs: Vec<f64> =
                (0..batch * sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..batch * sizes[sizes.len() - 1])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let err = fd_check(&net, &inputs, &upstream, batch);
            assert!(err < 1e-4, "sizes {sizes:?}: relative error {err}");
        }
    }

    #[test]
    fn adam_first_step() {
        let mut p = [0.0f64];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "{}", p[0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = [0.5f32, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 1e-2).unwrap();
        assert_eq!(p, [0.5, -2.0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = [0.5f32];
        let mut st = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut p, &[f32::NAN], &mut st, 1e-2),
            Err(Error::Numeric(_))
        ));
        assert_eq!(st.step, 0);
        assert_eq!(p, [0.5]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.1f32, 0.2, 0.3];
            let mut st = AdamState::new(3);
            for k in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| x * (k as f32 * 0.1).sin()).collect();
                adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn polyak_extremes_and_midpoint() {
        let online = Mlp::<f32>::from_params(&[1, 1], OutputActivation::Identity, vec![2.0, 2.0]).unwrap();
        let zero = Mlp::<f32>::zeros(&[1, 1], OutputActivation::Identity).unwrap();
        let mut t = zero.clone();
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        let mut t = zero.clone();
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, zero);
        let mut t = zero.clone();
        polyak_update(&mut t, &online, 0.5).unwrap();
        assert_eq!(t.params(), &[1.0, 1.0]);
        let other = Mlp::<f32>::zeros(&[2, 1], OutputActivation::Identity).unwrap();
        assert!(polyak_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let net = Mlp::<f32>::new(&[3, 4, 2], OutputActivation::Identity, 4).unwrap();
        let mut bytes = Vec::new();
        net.write_snapshot(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 3 * 4 + net.num_params() * 4);
        assert_eq!(&bytes[..8], &[3, 0, 0, 0, 3, 0, 0, 0]);
        let back = Mlp::read_snapshot(&bytes[..], OutputActivation::Identity).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::read_snapshot(&bytes[..10], OutputActivation::Identity).is_err());
    }
}
