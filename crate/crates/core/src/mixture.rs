//! Isotropic Gaussian mixtures and the analytic drifts they induce under a
//! linear reference with `Σ = σ_Σ·I`.

use std::io::Write;

use rand::{Rng, RngCore};

use crate::error::{domain, Error, Result};
use crate::linalg::check_len;
use crate::reference_sde::LinearRefSde;
use crate::rng::fill_normal;
use crate::sde::{Direction, DriftField};

/// Pairs whose log-responsibility falls this far below the best are dropped.
const PRUNE_LOG: f64 = 45.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `Σ_k w_k N(m_k, s_k² I)`; `s_k² = 0` is a point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || vars.len() != k {
            return Err(Error::Shape(format!("{k} weights, {} means, {} variances", means.len(), vars.len())));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Shape("component means must be nonempty".into()));
        }
        for m in &means {
            check_len(m, dim)?;
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return domain("mixture weights must be positive");
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return domain("mixture weights must sum to one");
        }
        if vars.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return domain("component variances must be nonnegative");
        }
        Ok(Self { weights, means: means.concat(), vars, dim })
    }

    pub fn one_dim(weights: &[f64], means: &[f64], vars: &[f64]) -> Result<Self> {
        Self::new(weights.to_vec(), means.iter().map(|&m| vec![m]).collect(), vars.to_vec())
    }

    /// Equal weights.
    pub fn uniform_1d(means: &[f64], vars: &[f64]) -> Result<Self> {
        let w = vec![1.0 / means.len() as f64; means.len()];
        Self::one_dim(&w, means, vars)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean_of(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn var_of(&self, k: usize) -> f64 {
        self.vars[k]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for k in 0..self.n_components() {
            for (o, m) in out.iter_mut().zip(self.mean_of(k)) {
                *o += self.weights[k] * m;
            }
        }
        out
    }

    /// Per-coordinate variance.
    pub fn variance(&self) -> Vec<f64> {
        let mu = self.mean();
        (0..self.dim)
            .map(|j| {
                (0..self.n_components())
                    .map(|k| self.weights[k] * (self.vars[k] + (self.mean_of(k)[j] - mu[j]).powi(2)))
                    .sum()
            })
            .collect()
    }

    fn log_component(&self, k: usize, x: &[f64]) -> f64 {
        let v = self.vars[k];
        let sq: f64 = x.iter().zip(self.mean_of(k)).map(|(a, b)| (a - b).powi(2)).sum();
        self.weights[k].ln() - 0.5 * self.dim as f64 * (LN_2PI + v.ln()) - 0.5 * sq / v
    }

    fn continuous_logs(&self, x: &[f64]) -> Result<(Vec<(usize, f64)>, f64)> {
        check_len(x, self.dim)?;
        let logs: Vec<(usize, f64)> =
            (0..self.n_components()).filter(|&k| self.vars[k] > 0.0).map(|k| (k, self.log_component(k, x))).collect();
        if logs.is_empty() {
            return domain("mixture has no absolutely continuous component");
        }
        let max = logs.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        Ok((logs, max))
    }

    /// Log-density of the absolutely continuous part.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (logs, max) = self.continuous_logs(x)?;
        Ok(max + logs.iter().map(|l| (l.1 - max).exp()).sum::<f64>().ln())
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// `∇ log p(x)`; point-mass components are outside the evaluation domain.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (logs, max) = self.continuous_logs(x)?;
        let mut total = 0.0;
        let mut out = vec![0.0; self.dim];
        for &(k, l) in &logs {
            let r = (l - max).exp();
            total += r;
            for (j, o) in out.iter_mut().enumerate() {
                *o += r * (self.mean_of(k)[j] - x[j]) / self.vars[k];
            }
        }
        Ok(out.into_iter().map(|v| v / total).collect())
    }

    /// `n` draws as an `n × d` row-major buffer.
    pub fn sample<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim);
        let mut z = vec![0.0; self.dim];
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.n_components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            fill_normal(rng, &mut z);
            let sd = self.vars[k].sqrt();
            out.extend(self.mean_of(k).iter().zip(&z).map(|(m, e)| m + sd * e));
        }
        out
    }
}

fn isotropic_scale(sde: &LinearRefSde) -> Result<f64> {
    sde.isotropic_variance().ok_or_else(|| Error::Domain("mixture drifts need an isotropic noise covariance".into()))
}

/// Law of `X_t` when `X_0 ~ gm` and `X` follows the reference.
pub fn gm_pushforward(gm: &GaussianMixture, sde: &LinearRefSde, t: f64) -> Result<GaussianMixture> {
    check_len(&vec![0.0; gm.dim], sde.dim())?;
    if !(t > 0.0 && t <= sde.tau()) {
        return domain(format!("pushforward time {t} outside (0, {}]", sde.tau()));
    }
    let s = isotropic_scale(sde)?;
    let m = sde.transition_moments(0.0, t)?;
    Ok(GaussianMixture {
        weights: gm.weights.clone(),
        means: gm.means.iter().map(|v| v * m.a).collect(),
        vars: gm.vars.iter().map(|v| v * m.a * m.a + m.v * s).collect(),
        dim: gm.dim,
    })
}

/// Drift at reverse time `t` of the time-reversed reference started from
/// `gm_initial`.
pub fn gm_reverse_drift(gm_initial: &GaussianMixture, sde: &LinearRefSde, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0 && t < sde.tau()) {
        return domain(format!("reverse time {t} outside [0, {})", sde.tau()));
    }
    let r = sde.tau() - t;
    let beta = sde.beta_at(r);
    let score = gm_pushforward(gm_initial, sde, r)?.score(x)?;
    let adj = sde.apply_cov(&score);
    Ok(x.iter().zip(&adj).map(|(xi, a)| sde.alpha() * beta * xi + beta * a).collect())
}

/// Posterior of the endpoints given `X_t = x` under the mixture of bridges
/// over the independent coupling `c0 ⊗ c1`, at an interior time.
pub struct BridgePosterior<'a> {
    c0: &'a GaussianMixture,
    c1: &'a GaussianMixture,
    a_hat: f64,
    a_check: f64,
    v_noise: f64,
}

impl<'a> BridgePosterior<'a> {
    pub fn new(c0: &'a GaussianMixture, c1: &'a GaussianMixture, sde: &LinearRefSde, t: f64) -> Result<Self> {
        if c0.dim != sde.dim() || c1.dim != sde.dim() {
            return Err(Error::DimensionMismatch { expected: sde.dim(), got: c0.dim.max(c1.dim) });
        }
        let s = isotropic_scale(sde)?;
        let bm = sde.bridge_moments(0.0, t, sde.tau())?;
        Ok(Self { c0, c1, a_hat: bm.a_hat, a_check: bm.a_check, v_noise: bm.v_bridge * s })
    }

    fn pair_var(&self, j: usize, k: usize) -> f64 {
        self.a_hat * self.a_hat * self.c0.vars[j] + self.a_check * self.a_check * self.c1.vars[k] + self.v_noise
    }

    /// The bridge-mixture marginal at this time.
    pub fn marginal(&self) -> GaussianMixture {
        let d = self.c0.dim;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for j in 0..self.c0.n_components() {
            for k in 0..self.c1.n_components() {
                weights.push(self.c0.weights[j] * self.c1.weights[k]);
                means.extend((0..d).map(|i| self.a_hat * self.c0.mean_of(j)[i] + self.a_check * self.c1.mean_of(k)[i]));
                vars.push(self.pair_var(j, k));
            }
        }
        GaussianMixture { weights, means, vars, dim: d }
    }

    /// Writes `E[X_0 | X_t = x]` and `E[X_τ | X_t = x]`.
    pub fn endpoint_means(&self, x: &[f64], e0: &mut [f64], e1: &mut [f64]) {
        let d = self.c0.dim;
        let (n0, n1) = (self.c0.n_components(), self.c1.n_components());
        let mut logs = Vec::with_capacity(n0 * n1);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n0 {
            for k in 0..n1 {
                let var = self.pair_var(j, k);
                let sq: f64 = (0..d)
                    .map(|i| {
                        let mean = self.a_hat * self.c0.mean_of(j)[i] + self.a_check * self.c1.mean_of(k)[i];
                        (x[i] - mean).powi(2)
                    })
                    .sum();
                let l = self.c0.weights[j].ln() + self.c1.weights[k].ln() - 0.5 * d as f64 * var.ln() - 0.5 * sq / var;
                max = max.max(l);
                logs.push(l);
            }
        }
        e0.fill(0.0);
        e1.fill(0.0);
        let mut total = 0.0;
        for j in 0..n0 {
            for k in 0..n1 {
                let l = logs[j * n1 + k];
                if l < max - PRUNE_LOG {
                    continue;
                }
                let r = (l - max).exp();
                total += r;
                let var = self.pair_var(j, k);
                let g0 = self.a_hat * self.c0.vars[j] / var;
                let g1 = self.a_check * self.c1.vars[k] / var;
                for i in 0..d {
                    let (m0, m1) = (self.c0.mean_of(j)[i], self.c1.mean_of(k)[i]);
                    let resid = x[i] - (self.a_hat * m0 + self.a_check * m1);
                    e0[i] += r * (m0 + g0 * resid);
                    e1[i] += r * (m1 + g1 * resid);
                }
            }
        }
        for v in e0.iter_mut().chain(e1.iter_mut()) {
            *v /= total;
        }
    }
}

/// The bridge-mixture marginal at `t ∈ (0, τ)`.
pub fn bridge_mixture_marginal(
    c0: &GaussianMixture,
    c1: &GaussianMixture,
    sde: &LinearRefSde,
    t: f64,
) -> Result<GaussianMixture> {
    Ok(BridgePosterior::new(c0, c1, sde, t)?.marginal())
}

/// DBM (forward, time `t`) or BDBM (backward, reverse time `t`) drift for
/// the independent coupling of two mixtures.
pub fn gm_dbm_drift(
    c0: &GaussianMixture,
    c1: &GaussianMixture,
    sde: &LinearRefSde,
    x: &[f64],
    t: f64,
    direction: Direction,
) -> Result<Vec<f64>> {
    let field = MixtureDbmDrift::new(c0.clone(), c1.clone(), sde.clone(), direction)?;
    let mut out = vec![0.0; x.len()];
    field.eval_batch(x, t, &mut out)?;
    Ok(out)
}

/// [`gm_dbm_drift`] as a drift field.
#[derive(Debug, Clone)]
pub struct MixtureDbmDrift {
    c0: GaussianMixture,
    c1: GaussianMixture,
    sde: LinearRefSde,
    direction: Direction,
}

impl MixtureDbmDrift {
    pub fn new(c0: GaussianMixture, c1: GaussianMixture, sde: LinearRefSde, direction: Direction) -> Result<Self> {
        isotropic_scale(&sde)?;
        if c0.dim != sde.dim() || c1.dim != sde.dim() {
            return Err(Error::DimensionMismatch { expected: sde.dim(), got: c0.dim.max(c1.dim) });
        }
        Ok(Self { c0, c1, sde, direction })
    }
}

impl DriftField for MixtureDbmDrift {
    fn dim(&self) -> usize {
        self.sde.dim()
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let tau = self.sde.tau();
        if !(t >= 0.0 && t < tau) {
            return domain(format!("drift time {t} outside [0, {tau})"));
        }
        let alpha = self.sde.alpha();
        // physical time of the state
        let phys = match self.direction {
            Direction::Forward => t,
            Direction::Backward => tau - t,
        };
        let beta = self.sde.beta_at(phys);
        let b_phys = self.sde.integrate_beta(phys)?;
        let posterior = if t > 0.0 { Some(BridgePosterior::new(&self.c0, &self.c1, &self.sde, phys)?) } else { None };
        let mut e0 = vec![0.0; d];
        let mut e1 = vec![0.0; d];
        let (fixed0, fixed1) = (self.c0.mean(), self.c1.mean());
        match self.direction {
            Direction::Forward => {
                let m = self.sde.moments_for_increment(self.sde.integrate_beta(tau)? - b_phys);
                for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    match &posterior {
                        Some(p) => p.endpoint_means(xi, &mut e0, &mut e1),
                        None => e1.copy_from_slice(&fixed1),
                    }
                    for i in 0..d {
                        oi[i] = -alpha * beta * xi[i] + beta * (m.a * e1[i] - m.a * m.a * xi[i]) / m.v;
                    }
                }
            }
            Direction::Backward => {
                let m = self.sde.moments_for_increment(b_phys);
                for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    match &posterior {
                        Some(p) => p.endpoint_means(xi, &mut e0, &mut e1),
                        None => e0.copy_from_slice(&fixed0),
                    }
                    for i in 0..d {
                        oi[i] = alpha * beta * xi[i] + beta * (m.a * e0[i] - xi[i]) / m.v;
                    }
                }
            }
        }
        Ok(())
    }
}

/// [`gm_reverse_drift`] as a drift field.
#[derive(Debug, Clone)]
pub struct MixtureReverseDrift {
    pub initial: GaussianMixture,
    pub sde: LinearRefSde,
}

impl DriftField for MixtureReverseDrift {
    fn dim(&self) -> usize {
        self.sde.dim()
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            oi.copy_from_slice(&gm_reverse_drift(&self.initial, &self.sde, xi, t)?);
        }
        Ok(())
    }
}

/// CSV `x,t,drift` of a scalar drift on the product grid `xs × ts`.
pub fn write_drift_grid<W: Write, D: DriftField + ?Sized>(mut w: W, field: &D, xs: &[f64], ts: &[f64]) -> Result<()> {
    if field.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: field.dim() });
    }
    writeln!(w, "x,t,drift")?;
    let mut out = vec![0.0; xs.len()];
    for &t in ts {
        field.eval_batch(xs, t, &mut out)?;
        for (x, v) in xs.iter().zip(&out) {
            writeln!(w, "{x:.16e},{t:.16e},{v:.16e}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{dbm_linear_coefficients, GaussianCoupling, GaussianDist};

    fn gamma() -> GaussianMixture {
        GaussianMixture::uniform_1d(&[-3.0, 0.5, 3.0], &[0.04; 3]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GaussianMixture::one_dim(&[0.5, 0.6], &[0.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(GaussianMixture::one_dim(&[1.0], &[0.0], &[-1.0]).is_err());
        assert!(GaussianMixture::one_dim(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn pushforward_point_mass() {
        let sde = LinearRefSde::brownian(0.5, 1, 2.0).unwrap();
        let gm = GaussianMixture::one_dim(&[1.0], &[0.0], &[0.0]).unwrap();
        let p = gm_pushforward(&gm, &sde, 1.5).unwrap();
        assert_eq!(p.mean_of(0), &[0.0]);
        assert!((p.var_of(0) - 0.25 * 1.5).abs() < 1e-15);
        let q = gm_pushforward(&gamma(), &sde, 1.0).unwrap();
        assert_eq!(q.mean_of(2), &[3.0]);
        assert!((q.var_of(1) - 0.29).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        let one = GaussianMixture::one_dim(&[1.0], &[1.0], &[2.0]).unwrap();
        assert!((one.score(&[0.0]).unwrap()[0] - 0.5).abs() < 1e-15);
        let sym = GaussianMixture::uniform_1d(&[-1.0, 1.0], &[0.3, 0.3]).unwrap();
        assert!(sym.score(&[0.0]).unwrap()[0].abs() < 1e-15);
        let g = gamma();
        let h = 1e-5;
        let fd = (g.log_density(&[1.0 + h]).unwrap() - g.log_density(&[1.0 - h]).unwrap()) / (2.0 * h);
        let s = g.score(&[1.0]).unwrap()[0];
        assert!(((s - fd) / s).abs() < 1e-6, "{s} {fd}");
        let atom = GaussianMixture::one_dim(&[1.0], &[0.0], &[0.0]).unwrap();
        assert!(atom.score(&[0.0]).is_err());
    }

    #[test]
    fn reverse_drift_single_gaussian_and_oddness() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let atom = GaussianMixture::one_dim(&[1.0], &[0.0], &[0.0]).unwrap();
        let v = gm_reverse_drift(&atom, &sde, &[0.8], 0.3).unwrap();
        assert!((v[0] - (-0.8 / 0.7)).abs() < 1e-14);
        let sym = GaussianMixture::uniform_1d(&[-2.0, 2.0], &[0.1, 0.1]).unwrap();
        for t in [0.0, 0.4, 0.9] {
            let a = gm_reverse_drift(&sym, &sde, &[0.7], t).unwrap()[0];
            let b = gm_reverse_drift(&sym, &sde, &[-0.7], t).unwrap()[0];
            assert!((a + b).abs() < 1e-13);
        }
    }

    #[test]
    fn dbm_drift_matches_gaussian_closed_form() {
        let sigma = 0.8;
        let sde = LinearRefSde::brownian(sigma, 1, 1.0).unwrap();
        let c0 = GaussianMixture::one_dim(&[1.0], &[-1.0], &[0.7]).unwrap();
        let c1 = GaussianMixture::one_dim(&[1.0], &[2.0], &[1.5]).unwrap();
        let coupling = GaussianCoupling::independent(
            GaussianDist::scalar(-1.0, 0.7).unwrap(),
            GaussianDist::scalar(2.0, 1.5).unwrap(),
        )
        .unwrap();
        for (x, t) in [(0.3, 0.2), (-1.5, 0.6), (2.2, 0.95), (0.0, 0.0)] {
            let (a, c) = dbm_linear_coefficients(&coupling, sigma, t).unwrap();
            let closed = a[(0, 0)] * x + c[0];
            let v = gm_dbm_drift(&c0, &c1, &sde, &[x], t, Direction::Forward).unwrap()[0];
            assert!((v - closed).abs() < 1e-10, "t={t}: {v} vs {closed}");
        }
    }

    #[test]
    fn schrodinger_follmer_symmetry() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let c0 = GaussianMixture::one_dim(&[1.0], &[0.0], &[0.0]).unwrap();
        let c1 = GaussianMixture::one_dim(&[1.0], &[0.0], &[1.0]).unwrap();
        let v = gm_dbm_drift(&c0, &c1, &sde, &[0.0], 0.5, Direction::Forward).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let sde = LinearRefSde::brownian(0.6, 1, 1.0).unwrap();
        let c0 = gamma();
        let c1 = GaussianMixture::uniform_1d(&[-1.0, 1.0], &[0.3, 0.1]).unwrap();
        let shift = 1.7;
        let move_gm =
            |g: &GaussianMixture| GaussianMixture { means: g.means.iter().map(|m| m + shift).collect(), ..g.clone() };
        let p = BridgePosterior::new(&c0, &c1, &sde, 0.4).unwrap();
        let (s0, s1) = (move_gm(&c0), move_gm(&c1));
        let q = BridgePosterior::new(&s0, &s1, &sde, 0.4).unwrap();
        let (mut a0, mut a1, mut b0, mut b1) = ([0.0], [0.0], [0.0], [0.0]);
        p.endpoint_means(&[0.2], &mut a0, &mut a1);
        q.endpoint_means(&[0.2 + shift], &mut b0, &mut b1);
        assert!((b1[0] - a1[0] - shift).abs() < 1e-12);
        assert!((b0[0] - a0[0] - shift).abs() < 1e-12);
    }

    #[test]
    fn left_endpoint_continuity() {
        let sde = LinearRefSde::brownian(0.5, 1, 1.0).unwrap();
        let c0 = gamma();
        let c1 = GaussianMixture::uniform_1d(&[-1.0, 1.5], &[0.3, 0.1]).unwrap();
        let at0 = gm_dbm_drift(&c0, &c1, &sde, &[0.45], 0.0, Direction::Forward).unwrap()[0];
        let near = gm_dbm_drift(&c0, &c1, &sde, &[0.45], 1e-7, Direction::Forward).unwrap()[0];
        assert!((at0 - (c1.mean()[0] - 0.45)).abs() < 1e-14);
        assert!((at0 - near).abs() < 1e-4, "{at0} {near}");
    }

    #[test]
    fn far_tails_do_not_underflow() {
        let sde = LinearRefSde::brownian(0.05, 1, 1.0).unwrap();
        let c0 = gamma();
        let c1 = GaussianMixture::uniform_1d(&[-1.0, 1.0], &[0.01, 0.01]).unwrap();
        for dir in [Direction::Forward, Direction::Backward] {
            let v = gm_dbm_drift(&c0, &c1, &sde, &[400.0], 0.5, dir).unwrap();
            assert!(v[0].is_finite());
        }
    }

    #[test]
    fn drift_grid_csv() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let field = MixtureReverseDrift { initial: gamma(), sde };
        let mut buf = Vec::new();
        write_drift_grid(&mut buf, &field, &[-1.0, 0.0, 1.0], &[0.0, 0.5]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("x,t,drift\n"));
    }
}
