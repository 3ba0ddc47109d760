//! Regression batches for score, bridge and drift-matching objectives.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{domain, Error, Result};
use crate::reference_sde::LinearRefSde;
use crate::rng::{fill_normal, open_unit};
use crate::sde::{sample_bridge_batch, CouplingSamples, Direction, PathBatch};

/// Inputs, targets and per-row weights of one regression step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub x_t: Vec<f64>,
    pub t: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    pub dim: usize,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(self) -> Result<Self> {
        let n = self.t.len();
        if self.x_t.len() != n * self.dim || self.target.len() != n * self.dim || self.weight.len() != n {
            return Err(Error::Shape("inconsistent loss batch".into()));
        }
        Ok(self)
    }
}

/// A source of i.i.d. samples.
pub trait Sampler: Send + Sync {
    fn dim(&self) -> usize;
    /// `n` draws as an `n × d` row-major buffer.
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Exact mean and covariance, when known.
    fn moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        None
    }
}

impl Sampler for crate::mixture::GaussianMixture {
    fn dim(&self) -> usize {
        crate::mixture::GaussianMixture::dim(self)
    }
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        crate::mixture::GaussianMixture::sample(self, n, rng)
    }
    fn moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let d = crate::mixture::GaussianMixture::dim(self);
        let mean = DVector::from_vec(self.mean());
        let mut second = DMatrix::zeros(d, d);
        for (k, w) in self.weights().iter().enumerate() {
            let m = DVector::from_column_slice(self.mean_of(k));
            second += (&m * m.transpose() + DMatrix::identity(d, d) * self.var_of(k)) * *w;
        }
        let cov = second - &mean * mean.transpose();
        Some((mean, cov))
    }
}

impl Sampler for crate::gaussian::GaussianDist {
    fn dim(&self) -> usize {
        crate::gaussian::GaussianDist::dim(self)
    }
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        crate::gaussian::GaussianDist::sample(self, n, rng)
    }
    fn moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        Some((self.mean.clone(), self.cov.clone()))
    }
}

fn uniform_times(n: usize, t_max: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n).map(|_| t_max * open_unit(rng)).collect()
}

/// Uniform times on `(lo, hi)`.
fn uniform_between(n: usize, lo: f64, hi: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * open_unit(rng)).collect()
}

fn check_t_max(sde: &LinearRefSde, t_max: f64) -> Result<()> {
    if !(t_max > 0.0 && t_max <= sde.tau()) {
        return domain(format!("t_max {t_max} outside (0, {}]", sde.tau()));
    }
    Ok(())
}

fn resample(c: &CouplingSamples, n: usize, rng: &mut dyn RngCore) -> Result<CouplingSamples> {
    if c.is_empty() {
        return domain("empty coupling");
    }
    let d = c.dim;
    let mut x0 = Vec::with_capacity(n * d);
    let mut x1 = Vec::with_capacity(n * d);
    for _ in 0..n {
        let i = rng.random_range(0..c.len());
        x0.extend_from_slice(c.start(i));
        x1.extend_from_slice(c.end(i));
    }
    Ok(CouplingSamples { x0, x_end: x1, dim: d })
}

/// Denoising score matching: `X_0 ~ Γ`, `X_t ~ R_{t|0}`, target
/// `∇ log r_{t|0}(X_t | X_0)`, weight `v(0, t)`.
pub fn make_sgm_batch(gamma: &dyn Sampler, sde: &LinearRefSde, n: usize, rng: &mut dyn RngCore) -> Result<LossBatch> {
    let d = sde.dim();
    if gamma.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: gamma.dim() });
    }
    let x0 = gamma.sample(n, rng);
    let t = uniform_times(n, sde.tau(), rng);
    let mut x_t = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    let mut weight = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for i in 0..n {
        let m = sde.transition_moments(0.0, t[i])?;
        fill_normal(rng, &mut z);
        sde.apply_sqrt_cov_into(&z, &mut noise);
        let a = &x0[i * d..(i + 1) * d];
        let xt: Vec<f64> = (0..d).map(|j| m.a * a[j] + m.v.sqrt() * noise[j]).collect();
        target.extend(sde.score_backward(0.0, t[i], a, &xt)?);
        x_t.extend(xt);
        weight.push(m.v);
    }
    LossBatch { x_t, t, target, weight, dim: d }.check()
}

/// Backward bridge matching: bridge points between coupled pairs, target
/// `∇ log r_{t|0}(X_t | X_0)`, weight `v(0, t)`.
pub fn make_bdbm_batch(
    coupling: &CouplingSamples,
    sde: &LinearRefSde,
    n: usize,
    rng: &mut dyn RngCore,
    t_max: f64,
) -> Result<LossBatch> {
    check_t_max(sde, t_max)?;
    let pairs = resample(coupling, n, rng)?;
    let t = uniform_times(n, t_max.min(sde.tau() * (1.0 - 1e-12)), rng);
    let x_t = sample_bridge_batch(&pairs, sde, &t, rng)?;
    let d = sde.dim();
    let mut target = Vec::with_capacity(n * d);
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        target.extend(sde.score_backward(0.0, t[i], pairs.start(i), &x_t[i * d..(i + 1) * d])?);
        weight.push(sde.transition_moments(0.0, t[i])?.v);
    }
    LossBatch { x_t, t, target, weight, dim: d }.check()
}

/// Forward bridge matching: target `∇_{X_t} log r_{τ|t}(X_τ | X_t)`, weight
/// `v(t, τ)`.
pub fn make_dbm_batch(
    coupling: &CouplingSamples,
    sde: &LinearRefSde,
    n: usize,
    rng: &mut dyn RngCore,
    t_max: f64,
) -> Result<LossBatch> {
    check_t_max(sde, t_max)?;
    let pairs = resample(coupling, n, rng)?;
    let t = uniform_times(n, t_max.min(sde.tau() * (1.0 - 1e-12)), rng);
    let x_t = sample_bridge_batch(&pairs, sde, &t, rng)?;
    let d = sde.dim();
    let tau = sde.tau();
    let mut target = Vec::with_capacity(n * d);
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        target.extend(sde.score_forward(t[i], tau, &x_t[i * d..(i + 1) * d], pairs.end(i))?);
        weight.push(sde.transition_moments(t[i], tau)?.v);
    }
    LossBatch { x_t, t, target, weight, dim: d }.check()
}

/// Direct drift regression for the Brownian reference with unit weight.
///
/// Forward rows use `t ∈ (0, t_max)` and target `(X_τ − X_t)/(τ − t)`.
/// Backward rows use physical `t ∈ (τ − t_max, τ)` and target
/// `(X_0 − X_t)/t`.
pub fn make_rf_batch(
    coupling: &CouplingSamples,
    sde: &LinearRefSde,
    n: usize,
    rng: &mut dyn RngCore,
    t_max: f64,
    direction: Direction,
) -> Result<LossBatch> {
    if !sde.is_scaled_brownian() {
        return domain("direct drift targets need a Brownian reference");
    }
    check_t_max(sde, t_max)?;
    let tau = sde.tau();
    let pairs = resample(coupling, n, rng)?;
    let t = match direction {
        Direction::Forward => uniform_times(n, t_max.min(tau * (1.0 - 1e-12)), rng),
        Direction::Backward => uniform_between(n, (tau - t_max).max(tau * 1e-12), tau, rng),
    };
    let x_t = sample_bridge_batch(&pairs, sde, &t, rng)?;
    let d = sde.dim();
    let mut target = Vec::with_capacity(n * d);
    for i in 0..n {
        let xt = &x_t[i * d..(i + 1) * d];
        match direction {
            Direction::Forward => target.extend(pairs.end(i).iter().zip(xt).map(|(e, x)| (e - x) / (tau - t[i]))),
            Direction::Backward => target.extend(pairs.start(i).iter().zip(xt).map(|(s, x)| (s - x) / t[i])),
        }
    }
    LossBatch { x_t, t, target, weight: vec![1.0; n], dim: d }.check()
}

/// Drift matching on cached paths: `(X_{t+Δt} − X_t)/Δt` at random
/// `(path, step)` pairs.
pub fn make_drift_matching_batch(paths: &PathBatch, n: usize, rng: &mut dyn RngCore) -> Result<LossBatch> {
    if paths.n_paths == 0 {
        return domain("no cached paths");
    }
    let d = paths.dim;
    let m = paths.m_steps();
    let mut x_t = Vec::with_capacity(n * d);
    let mut t = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n * d);
    for _ in 0..n {
        let p = rng.random_range(0..paths.n_paths);
        let k = rng.random_range(0..m);
        let (a, b) = (paths.point(p, k), paths.point(p, k + 1));
        x_t.extend_from_slice(a);
        t.push(paths.times[k]);
        target.extend(a.iter().zip(b).map(|(x, y)| (y - x) / paths.dt));
    }
    LossBatch { x_t, t, target, weight: vec![1.0; n], dim: d }.check()
}

/// Mean over rows of `weight·‖pred − target‖²` and its gradient in `pred`.
pub fn weighted_mse(pred: &[f64], batch: &LossBatch) -> Result<(f64, Vec<f64>)> {
    if pred.len() != batch.target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), batch.target.len())));
    }
    let n = batch.len();
    if n == 0 {
        return domain("empty loss batch");
    }
    let d = batch.dim;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..n {
        let w = batch.weight[i];
        for j in 0..d {
            let r = pred[i * d + j] - batch.target[i * d + j];
            loss += w * r * r;
            grad[i * d + j] = 2.0 * w * r / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianMixture;
    use crate::rng::seeded;

    #[test]
    fn sgm_chi_square_identity() {
        let sde = LinearRefSde::brownian(1.0, 2, 1.0).unwrap();
        let gm = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![0.0]).unwrap();
        let mut rng = seeded(1);
        let b = make_sgm_batch(&gm, &sde, 100_000, &mut rng).unwrap();
        let mut acc = 0.0;
        for i in 0..b.len() {
            let sq: f64 = b.target[2 * i..2 * i + 2].iter().map(|v| v * v).sum();
            acc += b.weight[i] * sq;
            assert!((b.weight[i] - b.t[i]).abs() < 1e-15);
            assert!((b.target[2 * i] + b.x_t[2 * i] / b.t[i]).abs() < 1e-9);
        }
        let mean = acc / b.len() as f64;
        // Var(‖Z‖²) = 2d
        assert!((mean - 2.0).abs() < 4.0 * (4.0f64 / b.len() as f64).sqrt(), "{mean}");
    }

    #[test]
    fn bdbm_and_dbm_brownian_forms() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let c = CouplingSamples::new(vec![-1.0, 0.5, 2.0], vec![1.0, 3.0, -2.0], 1).unwrap();
        let mut rng = seeded(2);
        let b = make_bdbm_batch(&c, &sde, 200, &mut rng, 1.0).unwrap();
        let d = make_dbm_batch(&c, &sde, 200, &mut rng, 1.0).unwrap();
        let starts = [-1.0, 0.5, 2.0];
        let ends = [1.0, 3.0, -2.0];
        for i in 0..200 {
            // the pin is recoverable from the bridge target
            let x0 = b.x_t[i] + b.t[i] * b.target[i];
            assert!(starts.iter().any(|s| (s - x0).abs() < 1e-9));
            assert!((b.weight[i] - b.t[i]).abs() < 1e-15);
            let x1 = d.x_t[i] + (1.0 - d.t[i]) * d.target[i];
            assert!(ends.iter().any(|s| (s - x1).abs() < 1e-9));
            assert!((d.weight[i] - (1.0 - d.t[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rf_targets_recover_pins() {
        let sde = LinearRefSde::brownian(0.3, 1, 1.0).unwrap();
        let c = CouplingSamples::new(vec![-1.0], vec![2.0], 1).unwrap();
        let mut rng = seeded(4);
        let f = make_rf_batch(&c, &sde, 50, &mut rng, 0.9995, Direction::Forward).unwrap();
        let b = make_rf_batch(&c, &sde, 50, &mut rng, 0.9995, Direction::Backward).unwrap();
        for i in 0..50 {
            assert!(f.t[i] < 0.9995);
            assert!((f.x_t[i] + (1.0 - f.t[i]) * f.target[i] - 2.0).abs() < 1e-9);
            assert!(b.t[i] > 1.0 - 0.9995);
            assert!((b.x_t[i] + b.t[i] * b.target[i] + 1.0).abs() < 1e-9);
            assert_eq!(f.weight[i], 1.0);
        }
        let ou =
            LinearRefSde::new(1.0, nalgebra::DMatrix::identity(1, 1), crate::BetaSchedule::Constant(1.0), 1.0).unwrap();
        assert!(make_rf_batch(&c, &ou, 5, &mut rng, 0.9, Direction::Forward).is_err());
    }

    #[test]
    fn drift_matching_on_linear_paths() {
        let m = 10;
        let values: Vec<f64> = (0..2).flat_map(|_| (0..=m).map(|k| 3.0 * k as f64 / m as f64)).collect();
        let paths = PathBatch::new(1.0, m, 1, values).unwrap();
        let b = make_drift_matching_batch(&paths, 30, &mut seeded(5)).unwrap();
        assert!(b.target.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn weighted_mse_examples() {
        let batch = LossBatch { x_t: vec![0.0, 0.0], t: vec![0.5], target: vec![1.0, 2.0], weight: vec![2.0], dim: 2 };
        let (l, g) = weighted_mse(&[2.0, 2.0], &batch).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g, vec![4.0, 0.0]);
        assert_eq!(weighted_mse(&[1.0, 2.0], &batch).unwrap().0, 0.0);
        assert!(weighted_mse(&[1.0], &batch).is_err());
        let pred = [0.3, -1.1];
        let (_, g) = weighted_mse(&pred, &batch).unwrap();
        for j in 0..2 {
            let mut p = pred;
            p[j] += 1e-6;
            let mut q = pred;
            q[j] -= 1e-6;
            let fd = (weighted_mse(&p, &batch).unwrap().0 - weighted_mse(&q, &batch).unwrap().0) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }
}
