//! Linear reference SDEs `dX = -αβ_t X dt + √β_t Σ^{1/2} dW` on `[0, τ]`.
//!
//! The process is an Ornstein-Uhlenbeck (or scaled Brownian, α = 0) process
//! run on the clock `b_t = ∫₀ᵗ β_u du`, so every transition and bridge
//! quantity is evaluated at b-time increments. Transition laws are Gaussian
//! with mean `a·y_s` and covariance `v·Σ`.

use nalgebra::DMatrix;
use rand::RngCore;

use crate::error::{domain, Error, Result};
use crate::linalg::{self, check_len};
use crate::rng::fill_normal;

/// Below this value of `α·Δb` the variance uses its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-8;

/// Time-change intensity `β_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    Constant(f64),
    /// Variance-exploding schedule, `b_t = σ_min²((σ_max/σ_min)^{2t} − 1)`.
    Ve {
        sigma_min: f64,
        sigma_max: f64,
    },
}

impl BetaSchedule {
    pub fn constant(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return domain(format!("constant beta must be positive, got {c}"));
        }
        Ok(Self::Constant(c))
    }

    pub fn ve(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return domain(format!("ve schedule needs sigma_max > sigma_min > 0, got ({sigma_min}, {sigma_max})"));
        }
        Ok(Self::Ve { sigma_min, sigma_max })
    }

    pub fn beta(&self, t: f64) -> f64 {
        match *self {
            Self::Constant(c) => c,
            Self::Ve { sigma_min, sigma_max } => {
                let ratio = sigma_max / sigma_min;
                sigma_min * sigma_min * ratio.powf(2.0 * t) * 2.0 * ratio.ln()
            }
        }
    }

    /// `b_t` in closed form.
    pub fn integral(&self, t: f64) -> f64 {
        match *self {
            Self::Constant(c) => c * t,
            Self::Ve { sigma_min, sigma_max } => {
                let ratio = sigma_max / sigma_min;
                // expm1 keeps b_t accurate for small t
                sigma_min * sigma_min * (2.0 * t * ratio.ln()).exp_m1()
            }
        }
    }
}

/// Moments of `Y_t | Y_s ~ N(a·Y_s, v·Σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMoments {
    pub a: f64,
    pub v: f64,
}

/// Moments of `Y_t | Y_s, Y_u ~ N(â·Y_s + ǎ·Y_u, ṽ·Σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeMoments {
    pub a_hat: f64,
    pub a_check: f64,
    pub v_bridge: f64,
}

#[derive(Debug, Clone)]
enum NoiseShape {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full,
}

/// The reference process. Immutable once built; the Cholesky factor and
/// inverse of Σ are cached at construction.
#[derive(Debug, Clone)]
pub struct LinearRefSde {
    alpha: f64,
    sigma_cov: DMatrix<f64>,
    beta: BetaSchedule,
    tau: f64,
    shape: NoiseShape,
    chol: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
}

impl LinearRefSde {
    pub fn new(alpha: f64, sigma_cov: DMatrix<f64>, beta: BetaSchedule, tau: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return domain(format!("alpha must be nonnegative, got {alpha}"));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return domain(format!("tau must be positive, got {tau}"));
        }
        let d = sigma_cov.nrows();
        if d == 0 {
            return domain("dimension must be positive");
        }
        linalg::check_square(&sigma_cov, d, "sigma_cov")?;
        if (&sigma_cov - sigma_cov.transpose()).amax() > 1e-12 * sigma_cov.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite("sigma_cov is not symmetric".into()));
        }
        let chol = linalg::cholesky(&sigma_cov, "sigma_cov")?;
        let cov_inv = linalg::inverse_spd(&sigma_cov, "sigma_cov")?;
        let shape = Self::classify(&sigma_cov);
        Ok(Self { alpha, sigma_cov, beta, tau, shape, chol, cov_inv })
    }

    /// `dX = σ dW` on `[0, τ]`.
    pub fn brownian(sigma: f64, dim: usize, tau: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return domain(format!("sigma must be positive, got {sigma}"));
        }
        Self::new(0.0, DMatrix::from_diagonal_element(dim, dim, sigma * sigma), BetaSchedule::Constant(1.0), tau)
    }

    fn classify(m: &DMatrix<f64>) -> NoiseShape {
        let d = m.nrows();
        let off_diagonal_zero = (0..d).all(|i| (0..d).all(|j| i == j || m[(i, j)] == 0.0));
        if !off_diagonal_zero {
            return NoiseShape::Full;
        }
        let diag: Vec<f64> = (0..d).map(|i| m[(i, i)]).collect();
        if diag.iter().all(|&v| v == diag[0]) {
            NoiseShape::Isotropic(diag[0])
        } else {
            NoiseShape::Diagonal(diag)
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.sigma_cov.nrows()
    }

    pub fn sigma_cov(&self) -> &DMatrix<f64> {
        &self.sigma_cov
    }

    pub fn schedule(&self) -> BetaSchedule {
        self.beta
    }

    /// The scalar `s` when `Σ = s·I`.
    pub fn isotropic_variance(&self) -> Option<f64> {
        match self.shape {
            NoiseShape::Isotropic(s) => Some(s),
            _ => None,
        }
    }

    /// True for `dX = σ dW` up to a constant time scaling.
    pub fn is_scaled_brownian(&self) -> bool {
        self.alpha == 0.0 && matches!(self.beta, BetaSchedule::Constant(_))
    }

    pub fn beta_at(&self, t: f64) -> f64 {
        self.beta.beta(t)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.tau) {
            return domain(format!("time {t} outside [0, {}]", self.tau));
        }
        Ok(())
    }

    pub fn integrate_beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta.integral(t))
    }

    /// Transition moments for a b-time increment `db > 0`.
    pub fn moments_for_increment(&self, db: f64) -> TransitionMoments {
        let a = (-self.alpha * db).exp();
        let x = self.alpha * db;
        let v = if self.alpha == 0.0 {
            db
        } else if x < SERIES_THRESHOLD {
            db * (1.0 - x + 2.0 * x * x / 3.0)
        } else {
            -(-2.0 * x).exp_m1() / (2.0 * self.alpha)
        };
        TransitionMoments { a, v }
    }

    pub fn transition_moments(&self, s: f64, t: f64) -> Result<TransitionMoments> {
        self.check_time(s)?;
        self.check_time(t)?;
        if s >= t {
            return domain(format!("transition needs s < t, got s={s}, t={t}"));
        }
        Ok(self.moments_for_increment(self.beta.integral(t) - self.beta.integral(s)))
    }

    /// `∇_{y_t} log p_{t|s}(y_t | y_s) = Σ⁻¹(a·y_s − y_t)/v`.
    pub fn score_backward(&self, s: f64, t: f64, y_s: &[f64], y_t: &[f64]) -> Result<Vec<f64>> {
        check_len(y_s, self.dim())?;
        check_len(y_t, self.dim())?;
        let m = self.transition_moments(s, t)?;
        let r: Vec<f64> = y_s.iter().zip(y_t).map(|(ys, yt)| (m.a * ys - yt) / m.v).collect();
        Ok(self.apply_cov_inv(&r))
    }

    /// `∇_{y_s} log p_{t|s}(y_t | y_s) = Σ⁻¹(y_t/a − y_s)·a²/v`.
    pub fn score_forward(&self, s: f64, t: f64, y_s: &[f64], y_t: &[f64]) -> Result<Vec<f64>> {
        check_len(y_s, self.dim())?;
        check_len(y_t, self.dim())?;
        let m = self.transition_moments(s, t)?;
        let r: Vec<f64> = y_s.iter().zip(y_t).map(|(ys, yt)| (yt * m.a - ys * m.a * m.a) / m.v).collect();
        Ok(self.apply_cov_inv(&r))
    }

    /// Moments of the bridge pinned at `s` and `u`, evaluated at `t`.
    pub fn bridge_moments(&self, s: f64, t: f64, u: f64) -> Result<BridgeMoments> {
        self.check_time(s)?;
        self.check_time(u)?;
        if !(s < t && t < u) {
            return domain(format!("bridge needs s < t < u, got ({s}, {t}, {u})"));
        }
        let (bs, bt, bu) = (self.beta.integral(s), self.beta.integral(t), self.beta.integral(u));
        Ok(self.bridge_moments_b(bt - bs, bu - bt))
    }

    /// Bridge moments from the b-time increments `s→t` and `t→u`.
    pub(crate) fn bridge_moments_b(&self, db_st: f64, db_tu: f64) -> BridgeMoments {
        let st = self.moments_for_increment(db_st);
        let tu = self.moments_for_increment(db_tu);
        let denom = st.v * tu.a * tu.a + tu.v;
        BridgeMoments { a_hat: tu.v * st.a / denom, a_check: st.v * tu.a / denom, v_bridge: st.v * tu.v / denom }
    }

    /// Drift of the bridge that hits `x_end` at `τ`:
    /// `μ_R(x,t) + Σ_R(x,t)·∇_x log r_{τ|t}(x_end | x)`.
    pub fn bridge_drift(&self, x: &[f64], t: f64, x_end: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        check_len(x_end, self.dim())?;
        if !(t >= 0.0 && t < self.tau) {
            return domain(format!("bridge drift needs 0 <= t < tau, got {t}"));
        }
        let beta = self.beta.beta(t);
        let m = self.moments_for_increment(self.beta.integral(self.tau) - self.beta.integral(t));
        // Σ·Σ⁻¹ cancels: Σ_R·score = β(a·x_end − a²·x)/v
        Ok(x.iter()
            .zip(x_end)
            .map(|(&xi, &ei)| -self.alpha * beta * xi + beta * (m.a * ei - m.a * m.a * xi) / m.v)
            .collect())
    }

    /// Exact draw of `X_t` given `X_0 = x0`, `X_τ = x_end`.
    pub fn sample_bridge_point<R: RngCore + ?Sized>(
        &self,
        x0: &[f64],
        x_end: &[f64],
        t: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        check_len(x0, self.dim())?;
        check_len(x_end, self.dim())?;
        let bm = self.bridge_moments(0.0, t, self.tau)?;
        let mut z = vec![0.0; self.dim()];
        fill_normal(rng, &mut z);
        let noise = self.apply_sqrt_cov(&z);
        let sd = bm.v_bridge.sqrt();
        Ok((0..self.dim()).map(|i| bm.a_hat * x0[i] + bm.a_check * x_end[i] + sd * noise[i]).collect())
    }

    /// `μ_R(x, t) = −αβ_t x`.
    pub fn reference_drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let k = -self.alpha * self.beta.beta(t);
        x.iter().map(|v| k * v).collect()
    }

    /// `Σ^{1/2} z` with the Cholesky factor as the square root.
    pub fn apply_sqrt_cov(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.apply_sqrt_cov_into(z, &mut out);
        out
    }

    pub(crate) fn apply_sqrt_cov_into(&self, z: &[f64], out: &mut [f64]) {
        match &self.shape {
            NoiseShape::Isotropic(s) => {
                let sd = s.sqrt();
                for (o, v) in out.iter_mut().zip(z) {
                    *o = sd * v;
                }
            }
            NoiseShape::Diagonal(diag) => {
                for ((o, v), s) in out.iter_mut().zip(z).zip(diag) {
                    *o = s.sqrt() * v;
                }
            }
            NoiseShape::Full => {
                let d = z.len();
                for i in 0..d {
                    out[i] = (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum();
                }
            }
        }
    }

    /// `Σ v`.
    pub fn apply_cov(&self, v: &[f64]) -> Vec<f64> {
        match &self.shape {
            NoiseShape::Isotropic(s) => v.iter().map(|x| s * x).collect(),
            NoiseShape::Diagonal(diag) => v.iter().zip(diag).map(|(x, s)| s * x).collect(),
            NoiseShape::Full => (&self.sigma_cov * nalgebra::DVector::from_column_slice(v)).iter().copied().collect(),
        }
    }

    /// `Σ⁻¹ v`.
    pub fn apply_cov_inv(&self, v: &[f64]) -> Vec<f64> {
        match &self.shape {
            NoiseShape::Isotropic(s) => v.iter().map(|x| x / s).collect(),
            NoiseShape::Diagonal(diag) => v.iter().zip(diag).map(|(x, s)| x / s).collect(),
            NoiseShape::Full => (&self.cov_inv * nalgebra::DVector::from_column_slice(v)).iter().copied().collect(),
        }
    }

    /// `uᵀ Σ⁻¹ w`.
    pub fn inv_inner(&self, u: &[f64], w: &[f64]) -> f64 {
        match &self.shape {
            NoiseShape::Isotropic(s) => u.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / s,
            NoiseShape::Diagonal(diag) => u.iter().zip(w).zip(diag).map(|((a, b), s)| a * b / s).sum(),
            NoiseShape::Full => {
                let wi = self.apply_cov_inv(w);
                u.iter().zip(&wi).map(|(a, b)| a * b).sum()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ve() -> LinearRefSde {
        LinearRefSde::new(0.0, DMatrix::identity(1, 1), BetaSchedule::ve(0.01, 50.0).unwrap(), 1.0).unwrap()
    }

    fn ou(alpha: f64) -> LinearRefSde {
        LinearRefSde::new(alpha, DMatrix::identity(1, 1), BetaSchedule::Constant(1.0), 60.0).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn ve_integral_closed_form() {
        let sde = ve();
        assert_eq!(sde.integrate_beta(0.0).unwrap(), 0.0);
        let b1 = sde.integrate_beta(1.0).unwrap();
        assert!((b1 - 2499.9999).abs() < 1e-9);
        // independent quadrature of β_t
        let q = simpson(|t| sde.beta_at(t), 0.0, 1.0, 20_000);
        assert!(((q - b1) / b1).abs() < 1e-8, "{q} vs {b1}");
    }

    #[test]
    fn constant_integral_and_domain() {
        let sde = LinearRefSde::new(0.0, DMatrix::identity(1, 1), BetaSchedule::Constant(1.0), 1.0).unwrap();
        assert!((sde.integrate_beta(0.7).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(sde.integrate_beta(1.5), Err(Error::Domain(_))));
        assert!(matches!(sde.integrate_beta(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn transition_moment_cases() {
        let bm = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let m = bm.transition_moments(0.0, 1.0).unwrap();
        assert_eq!((m.a, m.v), (1.0, 1.0));
        let m = ou(1.0).transition_moments(0.0, 1.0).unwrap();
        assert!((m.a - (-1.0f64).exp()).abs() < 1e-15);
        assert!((m.v - 0.432_332_358_381_693_6).abs() < 1e-12);
        let m = ou(0.5).transition_moments(0.0, 50.0).unwrap();
        assert!((m.v - 1.0).abs() < 1e-15);
        assert!(matches!(ou(1.0).transition_moments(0.5, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn series_branch_is_continuous() {
        let sde = ou(1e-3);
        let below = sde.moments_for_increment(0.99e-5).v;
        let above = sde.moments_for_increment(1.01e-5).v;
        assert!(below < above);
        let exact = |db: f64| -(-2e-3 * db).exp_m1() / 2e-3;
        assert!((below - exact(0.99e-5)).abs() / below < 1e-15);
        assert!((above - exact(1.01e-5)).abs() / above < 1e-9);
    }

    #[test]
    fn brownian_scores() {
        let sde = LinearRefSde::brownian(1.0, 2, 2.0).unwrap();
        let ys = [0.3, -1.0];
        let yt = [1.1, 0.4];
        let sb = sde.score_backward(0.5, 1.5, &ys, &yt).unwrap();
        let sf = sde.score_forward(0.5, 1.5, &ys, &yt).unwrap();
        for i in 0..2 {
            assert!((sb[i] - (ys[i] - yt[i])).abs() < 1e-14);
            assert!((sf[i] - (yt[i] - ys[i])).abs() < 1e-14);
        }
        let sde = ou(0.7);
        let m = sde.transition_moments(0.2, 1.0).unwrap();
        let zero = sde.score_backward(0.2, 1.0, &[2.0], &[2.0 * m.a]).unwrap();
        assert!(zero[0].abs() < 1e-14);
        let zero = sde.score_forward(0.2, 1.0, &[3.0 / m.a], &[3.0]).unwrap();
        assert!(zero[0].abs() < 1e-12);
    }

    #[test]
    fn bridge_moment_examples() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let b = sde.bridge_moments(0.0, 0.5, 1.0).unwrap();
        assert!((b.a_hat - 0.5).abs() < 1e-15);
        assert!((b.a_check - 0.5).abs() < 1e-15);
        assert!((b.v_bridge - 0.25).abs() < 1e-15);
        let near_left = sde.bridge_moments(0.0, 1e-9, 1.0).unwrap();
        assert!((near_left.a_hat - 1.0).abs() < 1e-8 && near_left.v_bridge < 1e-8);
        let near_right = sde.bridge_moments(0.0, 1.0 - 1e-9, 1.0).unwrap();
        assert!((near_right.a_check - 1.0).abs() < 1e-8 && near_right.v_bridge < 1e-8);
        assert!(sde.bridge_moments(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn bridge_drift_brownian_and_diagonal() {
        let sde = LinearRefSde::brownian(0.5, 1, 2.0).unwrap();
        let d = sde.bridge_drift(&[0.4], 0.5, &[1.9]).unwrap();
        assert!((d[0] - (1.9 - 0.4) / 1.5).abs() < 1e-14);
        assert!(sde.bridge_drift(&[0.0], 2.0, &[0.0]).is_err());

        let diag = LinearRefSde::new(
            0.3,
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 2.0])),
            BetaSchedule::Constant(1.5),
            1.0,
        )
        .unwrap();
        let full = diag.bridge_drift(&[0.2, -0.7], 0.4, &[1.0, 0.3]).unwrap();
        for (i, (x, e, s)) in [(0.2, 1.0, 0.5), (-0.7, 0.3, 2.0)].into_iter().enumerate() {
            let one = LinearRefSde::new(0.3, DMatrix::from_element(1, 1, s), BetaSchedule::Constant(1.5), 1.0).unwrap();
            let v = one.bridge_drift(&[x], 0.4, &[e]).unwrap();
            assert!((v[0] - full[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn bridge_sample_variance_brownian() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sde.sample_bridge_point(&[0.0], &[0.0], 0.5, &mut rng).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // std error of a sample variance for a Gaussian: var·sqrt(2/(n-1))
        let se = 0.25 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 0.25).abs() < 3.0 * se, "{var}");
        let near0 = sde.sample_bridge_point(&[1.5], &[-2.0], 1e-12, &mut rng).unwrap();
        assert!((near0[0] - 1.5).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_construction() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            LinearRefSde::new(0.0, bad, BetaSchedule::Constant(1.0), 1.0),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(BetaSchedule::ve(1.0, 0.5).is_err());
        assert!(BetaSchedule::constant(0.0).is_err());
    }
}
