//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Hidden layers use ReLU; the output head is softmax, `u_max·tanh`, or linear.
//! Batches are row-major `batch × width` matrices and every product goes
//! through `matrixmultiply`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar usable by the networks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {
    /// `C ← A·B + beta·C` for strided operands (`m×k` times `k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "matrix extent out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $f(
                        m, k, n, 1.0, a.as_ptr(), a_strides.0, a_strides.1, b.as_ptr(), b_strides.0,
                        b_strides.1, beta, c.as_mut_ptr(), c_strides.0, c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm);
impl_real!(f32, matrixmultiply::sgemm);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softmax,
    Tanh,
    Linear,
}

/// Weights (`out × in`, row-major) and biases for each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(other: &Params<T>) -> Self {
        Self {
            weights: other.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: other.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().flatten().chain(self.biases.iter_mut().flatten())
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    /// `self += scale·other`.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            *a = *a + scale * b;
        }
    }

    /// Mutable reference to the `k`-th entry in [`Params::iter`] order.
    pub fn flat_mut(&mut self, mut k: usize) -> &mut T {
        for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            if k < w.len() {
                return &mut w[k];
            }
            k -= w.len();
        }
        panic!("flat index out of range")
    }

    pub fn max_abs_diff(&self, other: &Params<T>) -> T {
        self.iter().zip(other.iter()).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layer_sizes: Vec<usize>,
    pub head: Head,
    pub u_max: T,
    pub params: Params<T>,
}

/// Parameter and input gradients for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle<T> {
    pub params: Params<T>,
    pub input: Vec<T>,
}

/// Activations kept by [`Mlp::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    pub batch: usize,
    /// `acts[0]` is the input; `acts[l]` for `0 < l < L` the ReLU outputs; `acts[L]` the head input.
    pub acts: Vec<Vec<T>>,
    pub output: Vec<T>,
}

/// Which gradients a batched backward pass should produce.
#[derive(Clone, Copy, Debug, Default)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init_glorot(layer_sizes: &[usize], head: Head, u_max: T, seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2 && layer_sizes.iter().all(|&s| s >= 1), "need at least 2 sizes, all ≥ 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new_inclusive(-bound, bound);
            weights.push((0..fan_in * fan_out).map(|_| T::lit(dist.sample(&mut rng))).collect());
            biases.push(vec![T::zero(); fan_out]);
        }
        Self { layer_sizes: layer_sizes.to_vec(), head, u_max, params: Params { weights, biases } }
    }

    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], head: Head, u_max: T) -> Self {
        let mut net = Self::init_glorot(layer_sizes, head, u_max, 0);
        net.params.iter_mut().for_each(|x| *x = T::zero());
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(input, 1)?.output)
    }

    pub fn forward_batch(&self, input: &[T], batch: usize) -> Result<Cache<T>> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, expected {batch}×{}",
                input.len(),
                self.input_dim()
            )));
        }
        let z1 = self.first_preactivation(input, batch);
        Ok(self.forward_from_first(input.to_vec(), z1, batch))
    }

    /// `X·W₀ᵀ + b₀` for a `batch × input_dim` matrix.
    pub fn first_preactivation(&self, input: &[T], batch: usize) -> Vec<T> {
        self.affine(0, input, batch)
    }

    fn affine(&self, layer: usize, x: &[T], batch: usize) -> Vec<T> {
        let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let bias = &self.params.biases[layer];
        let mut z = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            z.extend_from_slice(bias);
        }
        T::gemm(
            batch,
            fan_in,
            fan_out,
            x,
            (fan_in as isize, 1),
            &self.params.weights[layer],
            (1, fan_in as isize),
            T::one(),
            &mut z,
            (fan_out as isize, 1),
        );
        z
    }

    /// Continue a forward pass from a given first-layer pre-activation.
    /// `input` is stored in the cache as-is and only used for parameter gradients.
    pub fn forward_from_first(&self, input: Vec<T>, z1: Vec<T>, batch: usize) -> Cache<T> {
        let n = self.n_layers();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(input);
        let mut z = z1;
        for layer in 1..n {
            z.iter_mut().for_each(|v| *v = v.max(T::zero()));
            let next = self.affine(layer, &z, batch);
            acts.push(z);
            z = next;
        }
        let output = self.apply_head(&z, batch);
        acts.push(z);
        Cache { batch, acts, output }
    }

    fn apply_head(&self, z: &[T], batch: usize) -> Vec<T> {
        let width = self.output_dim();
        match self.head {
            Head::Linear => z.to_vec(),
            Head::Tanh => z.iter().map(|&v| self.u_max * v.tanh()).collect(),
            Head::Softmax => {
                let mut out = Vec::with_capacity(z.len());
                for row in z.chunks(width).take(batch) {
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
                    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
                    out.extend(exps.into_iter().map(|e| e / sum));
                }
                out
            }
        }
    }

    /// Gradient at the head input given `upstream = ∂L/∂output`.
    fn head_backward(&self, cache: &Cache<T>, upstream: &[T]) -> Vec<T> {
        let width = self.output_dim();
        let z = cache.acts.last().unwrap();
        match self.head {
            Head::Linear => upstream.to_vec(),
            Head::Tanh => z
                .iter()
                .zip(upstream)
                .map(|(&v, &g)| {
                    let t = v.tanh();
                    g * self.u_max * (T::one() - t * t)
                })
                .collect(),
            Head::Softmax => {
                let mut out = Vec::with_capacity(upstream.len());
                for (p, g) in cache.output.chunks(width).zip(upstream.chunks(width)) {
                    let dot = p.iter().zip(g).fold(T::zero(), |a, (&pi, &gi)| a + pi * gi);
                    out.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                out
            }
        }
    }

    /// Back-propagate down to the first-layer pre-activation; returns `∂L/∂z₁`
    /// and, if asked, parameter gradients of layers `1..L` accumulated into `grads`.
    fn backward_to_first(&self, cache: &Cache<T>, upstream: &[T], mut grads: Option<&mut Params<T>>) -> Vec<T> {
        let batch = cache.batch;
        let mut dz = self.head_backward(cache, upstream);
        for layer in (1..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            let x = &cache.acts[layer];
            if let Some(g) = grads.as_deref_mut() {
                accumulate_param_grads(g, layer, &dz, x, batch, fan_in, fan_out);
            }
            let mut dx = vec![T::zero(); batch * fan_in];
            T::gemm(
                batch,
                fan_out,
                fan_in,
                &dz,
                (fan_out as isize, 1),
                &self.params.weights[layer],
                (fan_in as isize, 1),
                T::zero(),
                &mut dx,
                (fan_in as isize, 1),
            );
            for (d, &a) in dx.iter_mut().zip(x) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            dz = dx;
        }
        dz
    }

    /// `∂L/∂z₁` only, skipping parameter gradients.
    pub fn first_layer_delta(&self, cache: &Cache<T>, upstream: &[T]) -> Vec<T> {
        self.backward_to_first(cache, upstream, None)
    }

    /// Input gradient restricted to input columns `cols`, from a first-layer delta.
    pub fn input_grad_cols(&self, dz1: &[T], batch: usize, cols: std::ops::Range<usize>) -> Vec<T> {
        let (fan_in, fan_out) = (self.layer_sizes[0], self.layer_sizes[1]);
        let width = cols.len();
        let mut out = vec![T::zero(); batch * width];
        if width == 0 {
            return out;
        }
        let w = &self.params.weights[0][cols.start..];
        T::gemm(
            batch,
            fan_out,
            width,
            dz1,
            (fan_out as isize, 1),
            w,
            (fan_in as isize, 1),
            T::zero(),
            &mut out,
            (width as isize, 1),
        );
        out
    }

    /// Batched backward pass; `upstream` is `batch × output_dim`.
    pub fn backward_batch(&self, cache: &Cache<T>, upstream: &[T], want: Want) -> Result<(Option<Params<T>>, Option<Vec<T>>)> {
        if upstream.len() != cache.batch * self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream has {} values, expected {}×{}",
                upstream.len(),
                cache.batch,
                self.output_dim()
            )));
        }
        let batch = cache.batch;
        let mut grads = want.params.then(|| Params::zeros_like(&self.params));
        let dz1 = self.backward_to_first(cache, upstream, grads.as_mut());
        if let Some(g) = grads.as_mut() {
            let (fan_in, fan_out) = (self.layer_sizes[0], self.layer_sizes[1]);
            accumulate_param_grads(g, 0, &dz1, &cache.acts[0], batch, fan_in, fan_out);
        }
        let input = want.input.then(|| self.input_grad_cols(&dz1, batch, 0..self.input_dim()));
        Ok((grads, input))
    }

    /// Single-sample gradients of `⟨upstream, output⟩` w.r.t. parameters and input.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<GradBundle<T>> {
        let cache = self.forward_batch(input, 1)?;
        let (p, x) = self.backward_batch(&cache, upstream, Want { params: true, input: true })?;
        Ok(GradBundle { params: p.unwrap(), input: x.unwrap() })
    }

    /// `self ← tau·main + (1−tau)·self`.
    pub fn soft_update_from(&mut self, main: &Mlp<T>, tau: T) {
        for (t, &m) in self.params.iter_mut().zip(main.params.iter()) {
            *t = tau * m + (T::one() - tau) * *t;
        }
    }
}

fn accumulate_param_grads<T: Real>(
    g: &mut Params<T>,
    layer: usize,
    dz: &[T],
    x: &[T],
    batch: usize,
    fan_in: usize,
    fan_out: usize,
) {
    T::gemm(
        fan_out,
        batch,
        fan_in,
        dz,
        (1, fan_out as isize),
        x,
        (fan_in as isize, 1),
        T::one(),
        &mut g.weights[layer],
        (fan_in as isize, 1),
    );
    for row in dz.chunks(fan_out) {
        for (b, &d) in g.biases[layer].iter_mut().zip(row) {
            *b = *b + d;
        }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Adam optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> OptimState<T> {
    /// Adam with `(β1, β2, ε) = (0.9, 0.999, 1e-8)`.
    pub fn adam(net: &Mlp<T>, lr: T) -> Self {
        Self {
            m: Params::zeros_like(&net.params),
            v: Params::zeros_like(&net.params),
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    /// One bias-corrected descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Params<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, &g), m), v) in net
            .params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// On-disk network format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub head: Head,
    pub u_max: f64,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub format_version: u32,
}

impl<T: Real> Mlp<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let weights = self
            .params
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| {
                w.chunks(self.layer_sizes[l])
                    .map(|row| row.iter().map(|x| x.to_f64().unwrap()).collect())
                    .collect()
            })
            .collect();
        Checkpoint {
            layer_sizes: self.layer_sizes.clone(),
            head: self.head,
            u_max: self.u_max.to_f64().unwrap(),
            weights,
            biases: self
                .params
                .biases
                .iter()
                .map(|b| b.iter().map(|x| x.to_f64().unwrap()).collect())
                .collect(),
            format_version: 1,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.format_version != 1 {
            return Err(Error::Config(format!("unsupported checkpoint version {}", c.format_version)));
        }
        let n = c.layer_sizes.len().saturating_sub(1);
        if n == 0 || c.weights.len() != n || c.biases.len() != n {
            return Err(Error::ShapeMismatch("checkpoint layer count".into()));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (c.layer_sizes[l], c.layer_sizes[l + 1]);
            if c.weights[l].len() != fan_out
                || c.weights[l].iter().any(|r| r.len() != fan_in)
                || c.biases[l].len() != fan_out
            {
                return Err(Error::ShapeMismatch(format!("checkpoint layer {l}")));
            }
            weights.push(c.weights[l].iter().flatten().map(|&x| T::lit(x)).collect());
            biases.push(c.biases[l].iter().map(|&x| T::lit(x)).collect());
        }
        let net = Self { layer_sizes: c.layer_sizes.clone(), head: c.head, u_max: T::lit(c.u_max), params: Params { weights, biases } };
        if !net.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(net)
    }
}

/// Relative error `|a−b| / max(|a|, |b|, floor)` used by the gradient checks.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Floor on the relative-error denominator; below it errors are absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Largest relative error between back-propagated gradients of `⟨upstream, f(x)⟩`
/// and central differences with step `h`, over every parameter and input coordinate.
pub fn grad_check(net: &Mlp<f64>, input: &[f64], upstream: &[f64], h: f64) -> Result<f64> {
    grad_check_strided(net, input, upstream, h, 1)
}

/// As [`grad_check`], probing every `stride`-th parameter (all inputs are probed).
pub fn grad_check_strided(net: &Mlp<f64>, input: &[f64], upstream: &[f64], h: f64, stride: usize) -> Result<f64> {
    let analytic = net.backward(input, upstream)?;
    let objective = |n: &Mlp<f64>, x: &[f64]| -> Result<f64> {
        Ok(n.forward(x)?.iter().zip(upstream).map(|(o, u)| o * u).sum())
    };
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (k, &an) in analytic.params.iter().enumerate().step_by(stride.max(1)) {
        let orig = *probe.params.flat_mut(k);
        *probe.params.flat_mut(k) = orig + h;
        let plus = objective(&probe, input)?;
        *probe.params.flat_mut(k) = orig - h;
        let minus = objective(&probe, input)?;
        *probe.params.flat_mut(k) = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(an, fd, GRAD_CHECK_FLOOR));
    }
    let mut x = input.to_vec();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = objective(net, &x)?;
        x[k] = orig - h;
        let minus = objective(net, &x)?;
        x[k] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.input[k], fd, GRAD_CHECK_FLOOR));
    }
    Ok(worst)
}
