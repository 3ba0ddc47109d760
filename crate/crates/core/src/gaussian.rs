//! Closed-form Gaussian Schrödinger bridges for the reference `dX = σ dW`
//! on `[0, 1]`: the entropic OT coupling, exact IDBM and IPF iterations,
//! the scalar correlation map and Gaussian KL.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::RngCore;

use crate::error::{domain, Error, Result};
use crate::linalg::{self, check_square};
use crate::rng::fill_normal;

/// The transfer ODE stops this far from `t = 1`; the remainder is covered by
/// one left-point step.
pub const EPS_END: f64 = 1e-6;

const UNIFORM_STEPS: usize = 10_000;
const UNIFORM_END: f64 = 0.99;
const GEOMETRIC_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_square(&cov, mean.len(), "covariance")?;
        linalg::cholesky(&cov, "covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `n` draws as rows of an `n × d` row-major buffer.
    pub fn sample<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let l = linalg::cholesky(&self.cov, "covariance").expect("validated at construction");
        let mut z = vec![0.0; d];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            fill_normal(rng, &mut z);
            for i in 0..d {
                let s: f64 = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
                out.push(self.mean[i] + s);
            }
        }
        out
    }
}

/// A Gaussian over `k` stacked blocks of dimension `d`. The covariance is
/// only required to be PSD (the σ = 0 couplings are singular).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub block_dim: usize,
}

impl BlockGaussian {
    pub fn blocks(&self) -> usize {
        self.mean.len() / self.block_dim
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.block_dim;
        self.cov.view((i * d, j * d), (d, d)).into_owned()
    }

    pub fn block_mean(&self, i: usize) -> DVector<f64> {
        self.mean.rows(i * self.block_dim, self.block_dim).into_owned()
    }

    pub fn from_coupling(c: &GaussianCoupling) -> Self {
        let d = c.marg0.dim();
        let mut mean = DVector::zeros(2 * d);
        mean.rows_mut(0, d).copy_from(&c.marg0.mean);
        mean.rows_mut(d, d).copy_from(&c.marg1.mean);
        let mut cov = DMatrix::zeros(2 * d, 2 * d);
        cov.view_mut((0, 0), (d, d)).copy_from(&c.marg0.cov);
        cov.view_mut((d, d), (d, d)).copy_from(&c.marg1.cov);
        cov.view_mut((0, d), (d, d)).copy_from(&c.cross);
        cov.view_mut((d, 0), (d, d)).copy_from(&c.cross.transpose());
        Self { mean, cov, block_dim: d }
    }

    fn assemble(blocks_mean: &[DVector<f64>], blocks: &[Vec<DMatrix<f64>>]) -> Self {
        let d = blocks_mean[0].len();
        let k = blocks_mean.len();
        let mut mean = DVector::zeros(k * d);
        let mut cov = DMatrix::zeros(k * d, k * d);
        for i in 0..k {
            mean.rows_mut(i * d, d).copy_from(&blocks_mean[i]);
            for j in 0..k {
                cov.view_mut((i * d, j * d), (d, d)).copy_from(&blocks[i][j]);
            }
        }
        Self { mean, cov, block_dim: d }
    }
}

/// Joint Gaussian law of `(X_0, X_1)` given by its marginals and the cross
/// covariance `Σ_C = Cov(X_0, X_1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCoupling {
    pub marg0: GaussianDist,
    pub marg1: GaussianDist,
    pub cross: DMatrix<f64>,
}

impl GaussianCoupling {
    pub fn new(marg0: GaussianDist, marg1: GaussianDist, cross: DMatrix<f64>) -> Result<Self> {
        let d = marg0.dim();
        if marg1.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: marg1.dim() });
        }
        check_square(&cross, d, "cross covariance")?;
        let c = Self { marg0, marg1, cross };
        let joint = BlockGaussian::from_coupling(&c);
        let scale = joint.cov.amax().max(1.0);
        if linalg::min_eigenvalue(&joint.cov) < -1e-9 * scale {
            return domain("coupling block matrix is not PSD");
        }
        Ok(c)
    }

    pub fn independent(marg0: GaussianDist, marg1: GaussianDist) -> Result<Self> {
        let d = marg0.dim();
        Self::new(marg0, marg1, DMatrix::zeros(d, d))
    }

    pub fn joint(&self) -> BlockGaussian {
        BlockGaussian::from_coupling(self)
    }

    /// Correlation `Σ_C/√(Σ_0Σ_1)` of a scalar coupling.
    pub fn correlation_1d(&self) -> f64 {
        self.cross[(0, 0)] / (self.marg0.cov[(0, 0)] * self.marg1.cov[(0, 0)]).sqrt()
    }

    fn with_cross(&self, cross: DMatrix<f64>) -> Self {
        Self { marg0: self.marg0.clone(), marg1: self.marg1.clone(), cross }
    }
}

/// Entropic OT coupling `Σ_S = (Σ_0Σ_1 + σ⁴/4 I)^{1/2} − σ²/2 I`.
pub fn eot_gaussian(gamma: &GaussianDist, upsilon: &GaussianDist, sigma: f64) -> Result<GaussianCoupling> {
    let d = gamma.dim();
    if upsilon.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: upsilon.dim() });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return domain(format!("sigma must be nonnegative, got {sigma}"));
    }
    let s4 = sigma.powi(4) / 4.0;
    let half = linalg::sqrt_psd(&gamma.cov);
    let half_inv = linalg::sym_apply(&gamma.cov, |v| 1.0 / v.sqrt());
    let inner = &half * &upsilon.cov * &half + DMatrix::identity(d, d) * s4;
    let root = linalg::sqrt_psd(&inner);
    let cross = &half * root * half_inv - DMatrix::identity(d, d) * (sigma * sigma / 2.0);
    Ok(GaussianCoupling { marg0: gamma.clone(), marg1: upsilon.clone(), cross })
}

fn check_interior(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return domain(format!("t must lie in (0, 1), got {t}"));
    }
    Ok(())
}

/// Covariance of the bridge mixture at time `t`.
fn sigma_tt(c: &GaussianCoupling, sigma: f64, t: f64) -> DMatrix<f64> {
    let d = c.marg0.dim();
    let s = 1.0 - t;
    &c.marg0.cov * (s * s)
        + &c.marg1.cov * (t * t)
        + (&c.cross + c.cross.transpose() + DMatrix::identity(d, d) * (sigma * sigma)) * (t * s)
}

/// Law of `(X_0, X_t, X_1)` under the mixture of `σW` bridges over `c`.
pub fn pi_joint(c: &GaussianCoupling, sigma: f64, t: f64) -> Result<BlockGaussian> {
    check_interior(t)?;
    let s = 1.0 - t;
    let m0 = c.marg0.mean.clone();
    let m1 = c.marg1.mean.clone();
    let mt = &m0 * s + &m1 * t;
    let s00 = c.marg0.cov.clone();
    let s11 = c.marg1.cov.clone();
    let s01 = c.cross.clone();
    let s0t = &s00 * s + &s01 * t;
    let st1 = &s01 * s + &s11 * t;
    let stt = sigma_tt(c, sigma, t);
    let blocks = vec![
        vec![s00.clone(), s0t.clone(), s01.clone()],
        vec![s0t.transpose(), stt, st1.clone()],
        vec![s01.transpose(), st1.transpose(), s11],
    ];
    Ok(BlockGaussian::assemble(&[m0, mt, m1], &blocks))
}

/// Drift `A_t x + c_t` of the DBM transport for a Gaussian coupling.
pub fn dbm_linear_coefficients(c: &GaussianCoupling, sigma: f64, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(0.0..=1.0 - EPS_END).contains(&t) {
        return domain(format!("t must lie in [0, 1 - {EPS_END}], got {t}"));
    }
    let a = drift_matrix(c, sigma, t)?;
    let mt = &c.marg0.mean * (1.0 - t) + &c.marg1.mean * t;
    let offset = (&c.marg1.mean - &c.marg0.mean) - &a * mt;
    Ok((a, offset))
}

// (Σ_{t1}ᵀΣ_tt⁻¹ − I)/(1 − t) with the (1 − t) factor cancelled analytically.
fn drift_matrix(c: &GaussianCoupling, sigma: f64, t: f64) -> Result<DMatrix<f64>> {
    let d = c.marg0.dim();
    let s = 1.0 - t;
    let numer = (c.cross.transpose() - &c.marg0.cov) * s
        + (&c.marg1.cov - &c.cross - DMatrix::identity(d, d) * (sigma * sigma)) * t;
    let stt = linalg::symmetrize(&sigma_tt(c, sigma, t));
    let lu = stt.lu();
    // A = numer · Σ_tt⁻¹  ⇔  Σ_tt Aᵀ = numerᵀ
    let at = lu
        .solve(&numer.transpose())
        .ok_or_else(|| Error::NumericalFailure { t, message: "singular bridge-mixture covariance".into() })?;
    let a = at.transpose();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { t, message: "non-finite drift matrix".into() });
    }
    Ok(a)
}

/// The time grid used by [`integrate_transfer_ode`].
pub fn transfer_grid() -> Vec<f64> {
    let mut grid = Vec::with_capacity(UNIFORM_STEPS + GEOMETRIC_STEPS + 1);
    for i in 0..=UNIFORM_STEPS {
        grid.push(UNIFORM_END * i as f64 / UNIFORM_STEPS as f64);
    }
    let gap0 = 1.0 - UNIFORM_END;
    let q = (EPS_END / gap0).powf(1.0 / GEOMETRIC_STEPS as f64);
    for k in 1..=GEOMETRIC_STEPS {
        let gap = if k == GEOMETRIC_STEPS { EPS_END } else { gap0 * q.powi(k as i32) };
        grid.push(1.0 - gap);
    }
    grid
}

/// `P_1` for `dP/dt = A_t P`, `P_0 = I`.
pub fn integrate_transfer_ode(c: &GaussianCoupling, sigma: f64) -> Result<DMatrix<f64>> {
    let d = c.marg0.dim();
    let grid = transfer_grid();
    let mut p = DMatrix::<f64>::identity(d, d);
    let mut a_left = drift_matrix(c, sigma, 0.0)?;
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let a_mid = drift_matrix(c, sigma, t0 + 0.5 * h)?;
        let a_right = drift_matrix(c, sigma, t1)?;
        let k1 = &a_left * &p;
        let k2 = &a_mid * (&p + &k1 * (0.5 * h));
        let k3 = &a_mid * (&p + &k2 * (0.5 * h));
        let k4 = &a_right * (&p + &k3 * h);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure { t: t1, message: "transfer matrix blew up".into() });
        }
        a_left = a_right;
    }
    // remaining EPS_END, A_t is bounded up to t = 1
    let tail = &a_left * &p * EPS_END;
    Ok(p + tail)
}

/// One exact IDBM iteration: `Σ_C ← Σ_0 P_1ᵀ`.
pub fn idbm_step_gaussian(c: &GaussianCoupling, sigma: f64) -> Result<GaussianCoupling> {
    let p = integrate_transfer_ode(c, sigma)?;
    Ok(c.with_cross(&c.marg0.cov * p.transpose()))
}

/// Correlation after one IDBM iteration of a scalar coupling with
/// correlation `rho_c` and marginal variances `s0`, `s1`.
pub fn rho_m_1d(rho_c: f64, s0: f64, s1: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let (a, b) = (s0.sqrt(), s1.sqrt());
    let s2 = sigma * sigma;
    let c1 = s2 + 2.0 * b * (rho_c * a - b);
    let c2 = s2 + 2.0 * a * (rho_c * b - a);
    let c3sq = (s2 + 2.0 * (rho_c + 1.0) * a * b) * (s2 + 2.0 * (rho_c - 1.0) * a * b);
    let scale = s2 + 2.0 * a * b;
    let exponent = if c3sq.abs() < 1e-24 * scale * scale {
        // limit c3 → 0 of the arctanh pair
        Complex64::new(-s2 * (c1 + c2) / (c1 * c2), 0.0)
    } else {
        let c3 = Complex64::new(c3sq, 0.0).sqrt();
        let z1 = Complex64::new(c1, 0.0) / c3;
        let z2 = Complex64::new(c2, 0.0) / c3;
        -(z1.atanh() + z2.atanh()) * s2 / c3
    };
    let out = exponent.exp();
    assert!(out.im.abs() <= 1e-10, "imaginary residue {} in rho_m_1d", out.im);
    out.re
}

/// Initial IPF joint `F⁰ = ΓR`: `[[Σ_0, Σ_0], [Σ_0, Σ_0 + σ²I]]`.
pub fn ipf_initial(gamma: &GaussianDist, sigma: f64) -> BlockGaussian {
    let d = gamma.dim();
    let lower = &gamma.cov + DMatrix::identity(d, d) * (sigma * sigma);
    BlockGaussian::assemble(
        &[gamma.mean.clone(), gamma.mean.clone()],
        &[vec![gamma.cov.clone(), gamma.cov.clone()], vec![gamma.cov.clone(), lower]],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

/// Replaces one marginal of a two-block Gaussian by `target`, keeping the
/// conditional law of the other block.
pub fn ipf_step_gaussian(joint: &BlockGaussian, target: &GaussianDist, side: Side) -> Result<BlockGaussian> {
    let d = joint.block_dim;
    if target.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: target.dim() });
    }
    let (x, y) = match side {
        Side::First => (0, 1),
        Side::Second => (1, 0),
    };
    let sxx = joint.block(x, x);
    let sxy = joint.block(x, y);
    let syy = joint.block(y, y);
    let sxx_inv = linalg::inverse_spd(&sxx, "replaced marginal covariance")
        .map_err(|_| Error::Domain("replaced marginal covariance is singular".into()))?;
    let k = sxy.transpose() * &sxx_inv;
    let lam_y = joint.block_mean(y) + &k * (&target.mean - joint.block_mean(x));
    let g_xy = &target.cov * &sxx_inv * &sxy;
    let g_yy = linalg::symmetrize(&(&syy + &k * (&target.cov * &sxx_inv - DMatrix::identity(d, d)) * &sxy));
    let mut means = vec![DVector::zeros(d), DVector::zeros(d)];
    means[x] = target.mean.clone();
    means[y] = lam_y;
    let mut blocks = vec![vec![DMatrix::zeros(d, d); 2]; 2];
    blocks[x][x] = target.cov.clone();
    blocks[x][y] = g_xy.clone();
    blocks[y][x] = g_xy.transpose();
    blocks[y][y] = g_yy;
    Ok(BlockGaussian::assemble(&means, &blocks))
}

/// `KL(p ‖ q)` between Gaussians given by moments. Returns `+∞` when `p` is
/// singular.
pub fn kl_moments(
    mean_p: &DVector<f64>,
    cov_p: &DMatrix<f64>,
    mean_q: &DVector<f64>,
    cov_q: &DMatrix<f64>,
) -> Result<f64> {
    let k = mean_p.len();
    if mean_q.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: mean_q.len() });
    }
    check_square(cov_p, k, "p covariance")?;
    check_square(cov_q, k, "q covariance")?;
    let lq = linalg::cholesky(cov_q, "q covariance")?;
    let logdet_q = 2.0 * lq.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet_p = match linalg::cholesky(cov_p, "p covariance") {
        Ok(lp) => 2.0 * lp.diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        Err(Error::NotPositiveDefinite(_)) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let chol = nalgebra::Cholesky::new(linalg::symmetrize(cov_q)).expect("checked above");
    let trace = chol.solve(cov_p).trace();
    let diff = mean_q - mean_p;
    let maha = diff.dot(&chol.solve(&diff));
    Ok(0.5 * (trace + maha - k as f64 + logdet_q - logdet_p))
}

pub fn gaussian_kl(p: &BlockGaussian, q: &BlockGaussian) -> Result<f64> {
    kl_moments(&p.mean, &p.cov, &q.mean, &q.cov)
}

/// KL of the first `n` IDBM iterates (iterations `1..=n`) to the static
/// bridge, starting from `start`.
pub fn idbm_kl_trajectory(start: &GaussianCoupling, sigma: f64, n: usize) -> Result<Vec<f64>> {
    let target = eot_gaussian(&start.marg0, &start.marg1, sigma)?.joint();
    let mut c = start.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        c = idbm_step_gaussian(&c, sigma)?;
        out.push(gaussian_kl(&c.joint(), &target)?);
    }
    Ok(out)
}

/// KL of the IPF iterates `F¹, …, Fⁿ` to the static bridge.
pub fn ipf_kl_trajectory(gamma: &GaussianDist, upsilon: &GaussianDist, sigma: f64, n: usize) -> Result<Vec<f64>> {
    let target = eot_gaussian(gamma, upsilon, sigma)?.joint();
    let mut joint = ipf_initial(gamma, sigma);
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        joint = if i % 2 == 1 {
            ipf_step_gaussian(&joint, upsilon, Side::Second)?
        } else {
            ipf_step_gaussian(&joint, gamma, Side::First)?
        };
        out.push(gaussian_kl(&joint, &target)?);
    }
    Ok(out)
}

/// DBM drift of a Gaussian coupling, tabulated on the Euler grid
/// `t_k = k/m` and computed on demand elsewhere.
pub struct GaussianDbmDrift {
    coupling: GaussianCoupling,
    sigma: f64,
    m_steps: usize,
    table: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl GaussianDbmDrift {
    pub fn new(coupling: GaussianCoupling, sigma: f64, m_steps: usize) -> Result<Self> {
        let table = (0..m_steps)
            .map(|k| dbm_linear_coefficients(&coupling, sigma, k as f64 / m_steps as f64))
            .collect::<Result<_>>()?;
        Ok(Self { coupling, sigma, m_steps, table })
    }
}

impl crate::sde::DriftField for GaussianDbmDrift {
    fn dim(&self) -> usize {
        self.coupling.marg0.dim()
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let k = (t * self.m_steps as f64).round() as usize;
        let computed;
        let (a, c) = if k < self.m_steps && (k as f64 / self.m_steps as f64 - t).abs() < 1e-12 {
            (&self.table[k].0, &self.table[k].1)
        } else {
            computed = dbm_linear_coefficients(&self.coupling, self.sigma, t)?;
            (&computed.0, &computed.1)
        };
        for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for i in 0..d {
                oi[i] = c[i] + (0..d).map(|j| a[(i, j)] * xi[j]).sum::<f64>();
            }
        }
        Ok(())
    }
}

/// Wishart draw with `dof` degrees of freedom and scale `scale·I`.
pub fn sample_wishart<R: RngCore + ?Sized>(d: usize, dof: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(d, dof);
    let mut z = vec![0.0; d * dof];
    fill_normal(rng, &mut z);
    for (i, v) in z.into_iter().enumerate() {
        g[(i % d, i / d)] = v * scale.sqrt();
    }
    &g * g.transpose()
}
