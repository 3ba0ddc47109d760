//! Euler–Maruyama simulation, exact bridge batches and path functionals.
//!
//! Points are stored row-major: a batch of `n` points in dimension `d` is a
//! flat `n·d` slice. Paths are stored path-major, `values[(p·(m+1) + k)·d + j]`.

use std::io::{Read, Write};

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::reference_sde::LinearRefSde;
use crate::rng::{fill_normal, path_stream};

/// States with a coordinate above this magnitude abort the simulation.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// From the first marginal at `t = 0` to the second at `t = τ`.
    Forward,
    /// Time-reversed: from the second marginal back to the first.
    Backward,
}

/// A drift evaluated on a batch of points at a common time.
pub trait DriftField: Sync {
    fn dim(&self) -> usize;

    /// Writes the drift at `(x_i, t)` for every row of `x` into `out`.
    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
}

impl<T: DriftField + ?Sized> DriftField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).eval_batch(x, t, out)
    }
}

impl<T: DriftField + ?Sized> DriftField for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).eval_batch(x, t, out)
    }
}

/// Drift defined pointwise by a closure `(x, t, out)`.
pub struct FnDrift<F> {
    dim: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> DriftField for FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        for (xi, oi) in x.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            (self.f)(xi, t, oi);
        }
        Ok(())
    }
}

pub struct ZeroDrift(pub usize);

impl DriftField for ZeroDrift {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval_batch(&self, _x: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// Paths on the uniform grid `t_k = k·τ/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub n_paths: usize,
    pub dim: usize,
    pub dt: f64,
}

impl PathBatch {
    pub fn new(tau: f64, m_steps: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if m_steps == 0 || dim == 0 {
            return Err(Error::Shape("paths need at least one step and one coordinate".into()));
        }
        let stride = (m_steps + 1) * dim;
        if !values.len().is_multiple_of(stride) {
            return Err(Error::Shape(format!("{} values do not split into paths of {stride}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite path value".into()));
        }
        let dt = tau / m_steps as f64;
        Ok(Self {
            times: (0..=m_steps).map(|k| k as f64 * dt).collect(),
            n_paths: values.len() / stride,
            values,
            dim,
            dt,
        })
    }

    pub fn m_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn tau(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    pub fn point(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.times.len() + step) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let stride = self.times.len() * self.dim;
        &self.values[path * stride..(path + 1) * stride]
    }

    /// All points at grid index `step`, as an `n × d` batch.
    pub fn slice_at(&self, step: usize) -> Vec<f64> {
        (0..self.n_paths).flat_map(|p| self.point(p, step).iter().copied()).collect()
    }

    pub fn endpoints(&self) -> CouplingSamples {
        CouplingSamples { x0: self.slice_at(0), x_end: self.slice_at(self.m_steps()), dim: self.dim }
    }

    /// PBV1: magic, `u32` n, `u32` m+1, `u32` d, then little-endian f64 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"PBV1")?;
        for v in [self.n_paths, self.times.len(), self.dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a PBV1 stream; the grid is rebuilt on `[0, tau]`.
    pub fn read_binary<R: Read>(mut r: R, tau: f64) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PBV1" {
            return Err(Error::Format("missing PBV1 magic".into()));
        }
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let [n, m1, d] = header;
        if m1 < 2 {
            return Err(Error::Format("grid must hold at least two times".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * m1 * d * 8 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header implies {}",
                bytes.len(),
                n * m1 * d * 8
            )));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Self::new(tau, m1 - 1, d, values)
    }

    /// Long-format CSV: `path,step,t,x0,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "path,step,t,{}", cols.join(","))?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                let xs: Vec<String> = self.point(p, k).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(w, "{p},{k},{t:.16e},{}", xs.join(","))?;
            }
        }
        Ok(())
    }
}

/// Paired endpoint samples `(x_0, x_τ)` of an empirical coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSamples {
    pub x0: Vec<f64>,
    pub x_end: Vec<f64>,
    pub dim: usize,
}

impl CouplingSamples {
    pub fn new(x0: Vec<f64>, x_end: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !x0.len().is_multiple_of(dim) || x0.len() != x_end.len() {
            return Err(Error::Shape(format!(
                "endpoint arrays of length {} and {} in dimension {dim}",
                x0.len(),
                x_end.len()
            )));
        }
        if x0.iter().chain(&x_end).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite coupling sample".into()));
        }
        Ok(Self { x0, x_end, dim })
    }

    pub fn len(&self) -> usize {
        self.x0.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn start(&self, i: usize) -> &[f64] {
        &self.x0[i * self.dim..(i + 1) * self.dim]
    }

    pub fn end(&self, i: usize) -> &[f64] {
        &self.x_end[i * self.dim..(i + 1) * self.dim]
    }

    /// Swaps the roles of the two endpoints.
    pub fn swapped(&self) -> Self {
        Self { x0: self.x_end.clone(), x_end: self.x0.clone(), dim: self.dim }
    }
}

/// Settings of one Euler run.
#[derive(Debug, Clone)]
pub struct EulerConfig {
    pub m_steps: usize,
    /// Drop the noise from the final increment.
    pub deterministic_last_step: bool,
    pub seed: u64,
    /// Stream index of the first path; path `i` uses stream `path_offset + i`.
    pub path_offset: u64,
    /// Evaluate the noise intensity at `τ − t` (time-reversed dynamics).
    pub reversed_time: bool,
    /// Accumulate `∫‖u‖²_{Σ_R⁻¹}dt` with `u = drift − μ_R` along each path.
    pub control_cost: bool,
}

impl EulerConfig {
    pub fn new(m_steps: usize, seed: u64) -> Self {
        Self {
            m_steps,
            deterministic_last_step: false,
            seed,
            path_offset: 0,
            reversed_time: false,
            control_cost: false,
        }
    }
}

/// Output of [`simulate`].
#[derive(Debug, Clone)]
pub struct EulerOutput {
    pub endpoints: CouplingSamples,
    /// The full path array when it was requested.
    pub paths: Option<PathBatch>,
    /// States at the requested snapshot steps, one `n × d` batch each.
    pub snapshots: Vec<Vec<f64>>,
    /// Path-averaged control cost when requested.
    pub control_cost: Option<f64>,
}

struct ChunkOut {
    terminal: Vec<f64>,
    full: Vec<f64>,
    snaps: Vec<Vec<f64>>,
    cost: f64,
}

/// Euler–Maruyama for `dY = drift(Y,t)dt + √β Σ^{1/2} dW` on the grid of
/// `sde`, starting from the rows of `x0`.
///
/// Path `i` draws its noise from its own stream, so the output does not
/// depend on how paths are split across workers.
pub fn simulate<D: DriftField + ?Sized>(
    drift: &D,
    sde: &LinearRefSde,
    x0: &[f64],
    cfg: &EulerConfig,
    keep_paths: bool,
    snapshot_steps: &[usize],
) -> Result<EulerOutput> {
    let d = sde.dim();
    if drift.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: drift.dim() });
    }
    if cfg.m_steps == 0 {
        return domain("m_steps must be at least 1");
    }
    if !x0.len().is_multiple_of(d) {
        return Err(Error::Shape(format!("{} initial values in dimension {d}", x0.len())));
    }
    if let Some(&k) = snapshot_steps.iter().find(|&&k| k > cfg.m_steps) {
        return domain(format!("snapshot step {k} beyond {} steps", cfg.m_steps));
    }
    let n = x0.len() / d;
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let outs: Vec<ChunkOut> = chunks
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            run_chunk(drift, sde, &x0[lo * d..hi * d], lo, cfg, keep_paths, snapshot_steps)
        })
        .collect::<Result<_>>()?;

    let mut terminal = Vec::with_capacity(n * d);
    let mut full = Vec::new();
    let mut snapshots = vec![Vec::with_capacity(n * d); snapshot_steps.len()];
    let mut cost = 0.0;
    for o in outs {
        terminal.extend_from_slice(&o.terminal);
        full.extend_from_slice(&o.full);
        for (s, v) in snapshots.iter_mut().zip(o.snaps) {
            s.extend_from_slice(&v);
        }
        cost += o.cost;
    }
    let paths = if keep_paths { Some(PathBatch::new(sde.tau(), cfg.m_steps, d, full)?) } else { None };
    Ok(EulerOutput {
        endpoints: CouplingSamples { x0: x0.to_vec(), x_end: terminal, dim: d },
        paths,
        snapshots,
        control_cost: cfg.control_cost.then(|| if n == 0 { 0.0 } else { cost / n as f64 }),
    })
}

fn run_chunk<D: DriftField + ?Sized>(
    drift: &D,
    sde: &LinearRefSde,
    x0: &[f64],
    first_path: usize,
    cfg: &EulerConfig,
    keep_paths: bool,
    snapshot_steps: &[usize],
) -> Result<ChunkOut> {
    let d = sde.dim();
    let n = x0.len() / d;
    let m = cfg.m_steps;
    let tau = sde.tau();
    let dt = tau / m as f64;
    let mut rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| path_stream(cfg.seed, cfg.path_offset + (first_path + i) as u64)).collect();
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n * d];
    let mut z = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut full = if keep_paths { vec![0.0; n * (m + 1) * d] } else { Vec::new() };
    let mut snaps = vec![Vec::new(); snapshot_steps.len()];
    let mut cost = 0.0;
    let record = |x: &[f64], k: usize, full: &mut Vec<f64>, snaps: &mut Vec<Vec<f64>>| {
        if keep_paths {
            for p in 0..n {
                let dst = (p * (m + 1) + k) * d;
                full[dst..dst + d].copy_from_slice(&x[p * d..(p + 1) * d]);
            }
        }
        for (s, &ks) in snaps.iter_mut().zip(snapshot_steps) {
            if ks == k {
                s.extend_from_slice(x);
            }
        }
    };
    record(&x, 0, &mut full, &mut snaps);
    for k in 0..m {
        let t = k as f64 * dt;
        drift.eval_batch(&x, t, &mut f)?;
        let t_noise = if cfg.reversed_time { tau - t } else { t };
        let beta = sde.beta_at(t_noise);
        if cfg.control_cost {
            let mu_scale = -sde.alpha() * beta;
            for p in 0..n {
                let u: Vec<f64> = (0..d).map(|j| f[p * d + j] - mu_scale * x[p * d + j]).collect();
                cost += sde.inv_inner(&u, &u) / beta * dt;
            }
        }
        let last_quiet = cfg.deterministic_last_step && k + 1 == m;
        let sd = (beta * dt).sqrt();
        for p in 0..n {
            let xp = &mut x[p * d..(p + 1) * d];
            let fp = &f[p * d..(p + 1) * d];
            if last_quiet {
                for j in 0..d {
                    xp[j] += fp[j] * dt;
                }
            } else {
                fill_normal(&mut rngs[p], &mut z);
                sde.apply_sqrt_cov_into(&z, &mut noise);
                for j in 0..d {
                    xp[j] += fp[j] * dt + sd * noise[j];
                }
            }
            if let Some(&bad) = xp.iter().find(|v| !(v.abs() <= DIVERGENCE_THRESHOLD)) {
                return Err(Error::Diverged { step: k + 1, path: first_path + p, value: bad });
            }
        }
        record(&x, k + 1, &mut full, &mut snaps);
    }
    Ok(ChunkOut { terminal: x, full, snaps, cost })
}

/// Full paths from `x0`.
pub fn euler_simulate<D: DriftField + ?Sized>(
    drift: &D,
    sde: &LinearRefSde,
    x0: &[f64],
    cfg: &EulerConfig,
) -> Result<PathBatch> {
    Ok(simulate(drift, sde, x0, cfg, true, &[])?.paths.expect("paths requested"))
}

/// Exact draws `X_t | X_0, X_τ` for each row, with its own time `t_batch[i]`.
pub fn sample_bridge_batch(
    c: &CouplingSamples,
    sde: &LinearRefSde,
    t_batch: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let d = sde.dim();
    if c.dim != d {
        return Err(Error::DimensionMismatch { expected: d, got: c.dim });
    }
    if t_batch.len() != c.len() {
        return Err(Error::Shape(format!("{} times for {} pairs", t_batch.len(), c.len())));
    }
    let tau = sde.tau();
    let b_tau = sde.integrate_beta(tau)?;
    let mut out = Vec::with_capacity(c.len() * d);
    let mut z = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for (i, &t) in t_batch.iter().enumerate() {
        if !(t > 0.0 && t < tau) {
            return domain(format!("bridge time {t} outside (0, {tau})"));
        }
        let bt = sde.integrate_beta(t)?;
        let bm = sde.bridge_moments_b(bt, b_tau - bt);
        fill_normal(rng, &mut z);
        sde.apply_sqrt_cov_into(&z, &mut noise);
        let sd = bm.v_bridge.sqrt();
        let (a, b) = (c.start(i), c.end(i));
        out.extend((0..d).map(|j| bm.a_hat * a[j] + bm.a_check * b[j] + sd * noise[j]));
    }
    Ok(out)
}

/// `X̄_t = X_{τ−t}`: the value array reversed along time.
pub fn reverse_paths(p: &PathBatch) -> PathBatch {
    let m1 = p.times.len();
    let d = p.dim;
    let mut values = Vec::with_capacity(p.values.len());
    for path in 0..p.n_paths {
        for k in (0..m1).rev() {
            values.extend_from_slice(p.point(path, k));
        }
    }
    PathBatch { times: p.times.clone(), values, n_paths: p.n_paths, dim: d, dt: p.dt }
}

/// Path average of the left Riemann sum of `‖u(X_t,t)‖²_{Σ_R⁻¹}` over the grid.
pub fn drift_norm_functional<D: DriftField + ?Sized>(u: &D, p: &PathBatch, sde: &LinearRefSde) -> Result<f64> {
    if p.n_paths == 0 {
        return Ok(0.0);
    }
    let d = p.dim;
    let mut out = vec![0.0; p.n_paths * d];
    let mut total = 0.0;
    for k in 0..p.m_steps() {
        let t = p.times[k];
        let x = p.slice_at(k);
        u.eval_batch(&x, t, &mut out)?;
        let beta = sde.beta_at(t);
        for row in out.chunks_exact(d) {
            total += sde.inv_inner(row, row) / beta * p.dt;
        }
    }
    Ok(total / p.n_paths as f64)
}

/// Discretized `log dP^μ/dP^γ` along one path with left-point drifts.
pub fn girsanov_log_ratio<A, B>(p: &PathBatch, path: usize, mu: &A, gamma: &B, sde: &LinearRefSde) -> Result<f64>
where
    A: DriftField + ?Sized,
    B: DriftField + ?Sized,
{
    let d = p.dim;
    let mut fm = vec![0.0; d];
    let mut fg = vec![0.0; d];
    let mut total = 0.0;
    for k in 0..p.m_steps() {
        let t = p.times[k];
        let x = p.point(path, k);
        mu.eval_batch(x, t, &mut fm)?;
        gamma.eval_batch(x, t, &mut fg)?;
        let beta = sde.beta_at(t);
        let diff: Vec<f64> = fm.iter().zip(&fg).map(|(a, b)| a - b).collect();
        let sum: Vec<f64> = fm.iter().zip(&fg).map(|(a, b)| a + b).collect();
        let dx: Vec<f64> = p.point(path, k + 1).iter().zip(x).map(|(b, a)| b - a).collect();
        total += sde.inv_inner(&diff, &dx) / beta - 0.5 * sde.inv_inner(&diff, &sum) / beta * p.dt;
    }
    Ok(total)
}

/// `E_t = x_t + (τ − t)·drift(x_t, t)` for the σW reference.
pub fn terminal_estimator<D: DriftField + ?Sized>(
    drift: &D,
    x_t: &[f64],
    t: f64,
    sde: &LinearRefSde,
) -> Result<Vec<f64>> {
    if !sde.is_scaled_brownian() {
        return domain("terminal estimator needs a Brownian reference");
    }
    if !(t >= 0.0 && t < sde.tau()) {
        return domain(format!("estimator time {t} outside [0, {})", sde.tau()));
    }
    let mut f = vec![0.0; x_t.len()];
    drift.eval_batch(x_t, t, &mut f)?;
    let h = sde.tau() - t;
    Ok(x_t.iter().zip(&f).map(|(x, v)| x + h * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use nalgebra::DMatrix;

    fn var(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn brownian_terminal_variance() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let n = 100_000;
        let out = simulate(&ZeroDrift(1), &sde, &vec![0.0; n], &EulerConfig::new(20, 1), false, &[]).unwrap();
        let v = var(&out.endpoints.x_end);
        let se = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((v - 1.0).abs() < 4.0 * se, "{v}");
    }

    #[test]
    fn linear_drift_bias_halves() {
        let sde = LinearRefSde::brownian(1e-9, 1, 1.0).unwrap();
        let drift = FnDrift::new(1, |x: &[f64], _t, o: &mut [f64]| o[0] = -x[0]);
        let exact = (-1.0f64).exp();
        let err = |m| {
            let out = simulate(&drift, &sde, &[1.0], &EulerConfig::new(m, 0), false, &[]).unwrap();
            (out.endpoints.x_end[0] - exact).abs()
        };
        let ratio = err(100) / err(200);
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn pinned_bridge_hits_endpoint() {
        let sigma = 0.7;
        let sde = LinearRefSde::brownian(sigma, 1, 1.0).unwrap();
        let target = 2.5;
        let drift = FnDrift::new(1, |x: &[f64], t, o: &mut [f64]| {
            o[0] = (target - x[0]) / (1.0 - t);
        });
        let m = 1000;
        let out = simulate(&drift, &sde, &vec![0.0; 2000], &EulerConfig::new(m, 3), false, &[]).unwrap();
        let mean_dist = out.endpoints.x_end.iter().map(|x| (x - target).abs()).sum::<f64>() / 2000.0;
        assert!(mean_dist <= 3.0 * (sigma * sigma / m as f64).sqrt(), "{mean_dist}");
    }

    #[test]
    fn deterministic_last_step_and_worker_independence() {
        let sde = LinearRefSde::brownian(1.0, 2, 1.0).unwrap();
        let x0 = vec![0.5; 2 * 300];
        let mut cfg = EulerConfig::new(10, 9);
        cfg.deterministic_last_step = true;
        let a = euler_simulate(&ZeroDrift(2), &sde, &x0, &cfg).unwrap();
        for p in 0..300 {
            assert_eq!(a.point(p, 9), a.point(p, 10));
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| euler_simulate(&ZeroDrift(2), &sde, &x0, &cfg).unwrap());
        assert_eq!(a, b);
        // a path's noise depends only on its stream index
        let mut shifted = cfg.clone();
        shifted.path_offset = 7;
        let c = euler_simulate(&ZeroDrift(2), &sde, &x0[14..], &shifted).unwrap();
        assert_eq!(c.path(0), a.path(7));
    }

    #[test]
    fn divergence_is_reported() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let drift = FnDrift::new(1, |x: &[f64], _t, o: &mut [f64]| o[0] = 1e6 * x[0] * x[0]);
        let err = simulate(&drift, &sde, &[1.0], &EulerConfig::new(100, 0), false, &[]).unwrap_err();
        assert!(matches!(err, Error::Diverged { path: 0, .. }));
    }

    #[test]
    fn bridge_batch_properties() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let n = 50_000;
        let c = CouplingSamples::new(vec![1.3; n], vec![1.3; n], 1).unwrap();
        let mut rng = seeded(4);
        let t: Vec<f64> = (0..n).map(|i| 0.01 + 0.98 * (i as f64 / n as f64)).collect();
        let xs = sample_bridge_batch(&c, &sde, &t, &mut rng).unwrap();
        let m = xs.iter().sum::<f64>() / n as f64;
        assert!((m - 1.3).abs() < 4.0 * (0.25f64 / n as f64).sqrt());
        let c1 = CouplingSamples::new(vec![-2.0], vec![5.0], 1).unwrap();
        let x = sample_bridge_batch(&c1, &sde, &[1e-14], &mut rng).unwrap();
        assert!((x[0] + 2.0).abs() < 1e-5);
        assert!(sample_bridge_batch(&c1, &sde, &[1.0], &mut rng).is_err());
    }

    #[test]
    fn reversal_is_an_involution() {
        let sde = LinearRefSde::brownian(1.0, 2, 1.0).unwrap();
        let p = euler_simulate(&ZeroDrift(2), &sde, &[0.0, 1.0, 2.0, 3.0], &EulerConfig::new(5, 2)).unwrap();
        let r = reverse_paths(&p);
        assert_eq!(r.point(1, 0), p.point(1, 5));
        assert_eq!(reverse_paths(&r), p);
        let flat = PathBatch::new(1.0, 3, 1, vec![2.0; 4]).unwrap();
        assert_eq!(reverse_paths(&flat), flat);
    }

    #[test]
    fn drift_norm_constant() {
        let sde = LinearRefSde::brownian(1.0, 2, 1.0).unwrap();
        let p = euler_simulate(&ZeroDrift(2), &sde, &[0.0; 20], &EulerConfig::new(50, 2)).unwrap();
        assert_eq!(drift_norm_functional(&ZeroDrift(2), &p, &sde).unwrap(), 0.0);
        let c = FnDrift::new(2, |_x: &[f64], _t, o: &mut [f64]| o.copy_from_slice(&[0.6, -0.8]));
        assert!((drift_norm_functional(&c, &p, &sde).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn girsanov_constant_drift() {
        let sde = LinearRefSde::brownian(1.0, 1, 2.0).unwrap();
        let c = 0.7;
        let mu = FnDrift::new(1, move |_x: &[f64], _t, o: &mut [f64]| o[0] = c);
        let p = euler_simulate(&mu, &sde, &[0.3, -1.0], &EulerConfig::new(40, 8)).unwrap();
        let lr = girsanov_log_ratio(&p, 1, &mu, &ZeroDrift(1), &sde).unwrap();
        let x = p.path(1);
        assert!((lr - (c * (x[40] - x[0]) - c * c * 2.0 / 2.0)).abs() < 1e-12);
        assert_eq!(girsanov_log_ratio(&p, 0, &mu, &mu, &sde).unwrap(), 0.0);
    }

    #[test]
    fn binary_and_csv_roundtrip() {
        let sde = LinearRefSde::new(
            0.0,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
            crate::BetaSchedule::Constant(1.0),
            1.5,
        )
        .unwrap();
        let p = euler_simulate(&ZeroDrift(2), &sde, &[0.0, 1.0, 2.0, 3.0], &EulerConfig::new(3, 2)).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PBV1");
        assert_eq!(buf.len(), 16 + 2 * 4 * 2 * 8);
        let back = PathBatch::read_binary(&buf[..], 1.5).unwrap();
        assert_eq!(back, p);
        assert!(PathBatch::read_binary(&buf[..buf.len() - 1], 1.5).is_err());
        let mut csv = Vec::new();
        p.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 2 * 4);
    }

    #[test]
    fn estimator_limits() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let drift = FnDrift::new(1, |x: &[f64], t, o: &mut [f64]| o[0] = (3.0 - x[0]) / (1.0 - t));
        let e = terminal_estimator(&drift, &[0.5], 0.4, &sde).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-14);
        let near = terminal_estimator(&ZeroDrift(1), &[0.5], 1.0 - 1e-12, &sde).unwrap();
        assert_eq!(near[0], 0.5);
        assert!(terminal_estimator(&ZeroDrift(1), &[0.5], 1.0, &sde).is_err());
    }
}
