//! Drift approximators `α(θ, x, t)`: a ReLU multilayer perceptron with
//! hand-written reverse mode, a time-polynomial linear model, Adam and EMA.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    n: usize,
    acts: Vec<DMatrix<f64>>,
}

/// A regression model over `(x, t)` with a flat parameter vector.
pub trait DriftModel: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    /// Replaces the parameters; invalidates outstanding caches.
    fn set_params(&mut self, p: &[f64]);
    /// Applies `f` to the parameters in place; invalidates outstanding caches.
    fn update_params(&mut self, f: &mut dyn FnMut(&mut [f64]));

    /// Outputs for rows of `x` (`n × d`) at per-row times `t`.
    fn forward(&self, x: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t)?.0)
    }

    fn forward_cached(&self, x: &[f64], t: &[f64]) -> Result<(Vec<f64>, ForwardCache)>;

    /// Parameter gradient of `Σ_i ⟨grad_out_i, output_i⟩`.
    fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Vec<f64>>;

    fn n_params(&self) -> usize {
        self.params().len()
    }
}

fn batch_input(x: &[f64], t: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if x.len() != t.len() * d {
        return Err(Error::Shape(format!("{} inputs for {} times in dimension {d}", x.len(), t.len())));
    }
    Ok(DMatrix::from_fn(d + 1, t.len(), |i, j| if i < d { x[j * d + i] } else { t[j] }))
}

fn check_cache(version: u64, cache: &ForwardCache, grad_out: &[f64], out_dim: usize) -> Result<()> {
    if cache.version != version {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    if grad_out.len() != cache.n * out_dim {
        return Err(Error::StaleCache(format!("cache holds {} rows, gradient has {} values", cache.n, grad_out.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// State dimension `d`; the network input is `d + 1`.
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(state_dim: usize, hidden: Vec<usize>, init_seed: u64) -> Self {
        Self { state_dim, hidden, init_seed }
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.state_dim + 1];
        s.extend(&self.hidden);
        s.push(self.state_dim);
        s
    }
}

/// Fully connected ReLU network. Layer `l` stores `W_l` (`out × in`,
/// column-major) followed by `b_l`.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    version: u64,
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        let sizes = spec.layer_sizes();
        if sizes.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        let mut rng = seeded(spec.init_seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { sizes, params, version: next_version() })
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape("need at least input and output layers".into()));
        }
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::Shape(format!("{} parameters for {expected} slots", params.len())));
        }
        Ok(Self { sizes, params, version: next_version() })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for w in self.sizes.windows(2) {
            off.push(off.last().unwrap() + w[0] * w[1] + w[1]);
        }
        off
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize, off: usize) -> (DMatrixView<'a, f64>, &'a [f64]) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = DMatrixView::from_slice(&params[off..off + fan_in * fan_out], fan_out, fan_in);
        let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        (w, b)
    }

    /// MLPV1: magic, `u32` layer count, `u32` sizes, little-endian f64 parameters.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"MLPV1")?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != b"MLPV1" {
            return Err(Error::Format("missing MLPV1 magic".into()));
        }
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let n = u32::from_le_bytes(b) as usize;
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b)?;
            sizes.push(u32::from_le_bytes(b) as usize);
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("truncated parameter payload".into()));
        }
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_parts(sizes, params)
    }
}

impl DriftModel for Mlp {
    fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.params.len(), "parameter count");
        self.params.copy_from_slice(p);
        self.version = next_version();
    }

    fn update_params(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.params);
        self.version = next_version();
    }

    fn forward_cached(&self, x: &[f64], t: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let d = self.input_dim() - 1;
        let mut a = batch_input(x, t, d)?;
        let offs = self.offsets();
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (w, b) = self.layer(&self.params, l, offs[l]);
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                    if l + 1 < n_layers && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(std::mem::replace(&mut a, z));
        }
        let out = a.as_slice().to_vec();
        Ok((out, ForwardCache { version: self.version, n: t.len(), acts }))
    }

    fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Vec<f64>> {
        let out_dim = self.output_dim();
        check_cache(self.version, cache, grad_out, out_dim)?;
        let offs = self.offsets();
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = DMatrix::from_column_slice(out_dim, cache.n, grad_out);
        for l in (0..self.sizes.len() - 1).rev() {
            let a_in = &cache.acts[l];
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offs[l];
            let gw = &delta * a_in.transpose();
            grads[off..off + fan_in * fan_out].copy_from_slice(gw.as_slice());
            for (i, g) in grads[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].iter_mut().enumerate() {
                *g = delta.row(i).sum();
            }
            if l > 0 {
                let (w, _) = self.layer(&self.params, l, off);
                let mut next = w.transpose() * &delta;
                // ReLU mask from the stored post-activation
                for (v, a) in next.iter_mut().zip(a_in.iter()) {
                    if *a <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(grads)
    }
}

/// `out(x, t) = W(t)x + c(t)` with entries expanded in Legendre polynomials
/// of `2t/τ − 1`.
#[derive(Debug, Clone)]
pub struct TimeLinear {
    dim: usize,
    degree: usize,
    tau: f64,
    params: Vec<f64>,
    version: u64,
}

impl TimeLinear {
    pub fn zeros(dim: usize, degree: usize, tau: f64) -> Self {
        Self { dim, degree, tau, params: vec![0.0; (dim * dim + dim) * (degree + 1)], version: next_version() }
    }

    fn basis(&self, t: f64) -> Vec<f64> {
        let s = 2.0 * t / self.tau - 1.0;
        let mut p = vec![1.0; self.degree + 1];
        if self.degree >= 1 {
            p[1] = s;
        }
        for k in 2..=self.degree {
            let kf = k as f64;
            p[k] = ((2.0 * kf - 1.0) * s * p[k - 1] - (kf - 1.0) * p[k - 2]) / kf;
        }
        p
    }

    // features: [x_0 P(t), ..., x_{d-1} P(t), P(t)]
    fn features(&self, x: &[f64], t: f64) -> Vec<f64> {
        let p = self.basis(t);
        let mut f = Vec::with_capacity((self.dim + 1) * p.len());
        for xi in x.iter().chain(std::iter::once(&1.0)) {
            f.extend(p.iter().map(|v| v * xi));
        }
        f
    }
}

impl DriftModel for TimeLinear {
    fn input_dim(&self) -> usize {
        self.dim + 1
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) {
        self.params.copy_from_slice(p);
        self.version = next_version();
    }

    fn update_params(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.params);
        self.version = next_version();
    }

    fn forward_cached(&self, x: &[f64], t: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let d = self.dim;
        if x.len() != t.len() * d {
            return Err(Error::Shape(format!("{} inputs for {} times in dimension {d}", x.len(), t.len())));
        }
        let nf = (d + 1) * (self.degree + 1);
        let mut feats = DMatrix::zeros(nf, t.len());
        let mut out = Vec::with_capacity(x.len());
        for (j, &tj) in t.iter().enumerate() {
            let f = self.features(&x[j * d..(j + 1) * d], tj);
            for i in 0..d {
                let row = &self.params[i * nf..(i + 1) * nf];
                out.push(row.iter().zip(&f).map(|(a, b)| a * b).sum());
            }
            feats.column_mut(j).copy_from_slice(&f);
        }
        Ok((out, ForwardCache { version: self.version, n: t.len(), acts: vec![feats] }))
    }

    fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Vec<f64>> {
        check_cache(self.version, cache, grad_out, self.dim)?;
        let feats = &cache.acts[0];
        let nf = feats.nrows();
        let mut g = vec![0.0; self.params.len()];
        for j in 0..cache.n {
            for i in 0..self.dim {
                let go = grad_out[j * self.dim + i];
                for (k, f) in feats.column(j).iter().enumerate() {
                    g[i * nf + k] += go * f;
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state shape");
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<f64>,
    warmup: bool,
    updates: u64,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self { decay, shadow: params.to_vec(), warmup: false, updates: 0 }
    }

    /// Uses `min(decay, (1 + k)/(10 + k))` at update `k`, so early
    /// averages are not dominated by the initialization.
    pub fn with_warmup(params: &[f64], decay: f64) -> Self {
        Self { warmup: true, ..Self::new(params, decay) }
    }

    pub fn update(&mut self, params: &[f64]) {
        let k = self.updates as f64;
        let decay = if self.warmup { self.decay.min((1.0 + k) / (10.0 + k)) } else { self.decay };
        self.updates += 1;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = decay * *s + (1.0 - decay) * p;
        }
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }
}
