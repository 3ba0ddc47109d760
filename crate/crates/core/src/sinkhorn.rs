//! Log-domain Sinkhorn iterations for discrete entropic optimal transport.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-9;
const COL_BLOCK: usize = 256;

/// `min ⟨C, P⟩ + ε KL(P | μ⊗ν)` over couplings of `mu` and `nu`.
#[derive(Debug, Clone)]
pub struct DiscreteEotProblem {
    mu: Vec<f64>,
    nu: Vec<f64>,
    /// Row-major `m × n`.
    cost: Vec<f64>,
    eps: f64,
}

fn check_simplex(w: &[f64], name: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("{name} must be nonempty and nonnegative")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{name} sums to {s}")));
    }
    Ok(())
}

impl DiscreteEotProblem {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>, cost: Vec<f64>, eps: f64) -> Result<Self> {
        check_simplex(&mu, "mu")?;
        check_simplex(&nu, "nu")?;
        if cost.len() != mu.len() * nu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len() * nu.len(), got: cost.len() });
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("cost must be finite".into()));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Domain(format!("eps = {eps} must be positive")));
        }
        Ok(Self { mu, nu, cost, eps })
    }

    /// Squared Euclidean cost between two 1D grids.
    pub fn squared_euclidean_1d(xs: &[f64], ys: &[f64], mu: Vec<f64>, nu: Vec<f64>, eps: f64) -> Result<Self> {
        let cost = xs.iter().flat_map(|x| ys.iter().map(move |y| (x - y) * (x - y))).collect();
        Self::new(mu, nu, cost, eps)
    }

    pub fn rows(&self) -> usize {
        self.mu.len()
    }

    pub fn cols(&self) -> usize {
        self.nu.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.nu.len() + j]
    }

    /// Same problem with marginals swapped and the cost transposed.
    pub fn transposed(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut cost = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                cost[j * m + i] = self.cost[i * n + j];
            }
        }
        Self { mu: self.nu.clone(), nu: self.mu.clone(), cost, eps: self.eps }
    }
}

/// Solver output; `plan` is row-major `m × n`.
#[derive(Debug, Clone)]
pub struct DiscreteCoupling {
    pub plan: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Potentials in cost units: `P = diag(e^{u/ε}) e^{−C/ε} diag(e^{v/ε})`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// L1 row-marginal error at exit (columns are exact after each sweep).
    pub residual: f64,
    /// Residual measured at the start of every iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

fn ln_or_neg_inf(w: f64) -> f64 {
    if w > 0.0 {
        w.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `ln Σ_j exp((v_j − C_ij)/ε)` for each row.
fn row_lse(p: &DiscreteEotProblem, v: &[f64]) -> Vec<f64> {
    let n = p.cols();
    let inv = 1.0 / p.eps;
    p.cost
        .par_chunks(n)
        .map(|row| {
            let mut mx = f64::NEG_INFINITY;
            for (c, vj) in row.iter().zip(v) {
                mx = mx.max((vj - c) * inv);
            }
            if mx == f64::NEG_INFINITY {
                return mx;
            }
            let s: f64 = row.iter().zip(v).map(|(c, vj)| ((vj - c) * inv - mx).exp()).sum();
            mx + s.ln()
        })
        .collect()
}

/// `ln Σ_i exp((u_i − C_ij)/ε)` for each column, streaming over rows.
fn col_lse(p: &DiscreteEotProblem, u: &[f64]) -> Vec<f64> {
    let (m, n) = (p.rows(), p.cols());
    let inv = 1.0 / p.eps;
    let mut out = vec![0.0; n];
    out.par_chunks_mut(COL_BLOCK).enumerate().for_each(|(b, chunk)| {
        let j0 = b * COL_BLOCK;
        let w = chunk.len();
        let mut mx = vec![f64::NEG_INFINITY; w];
        for (i, ui) in u.iter().enumerate().take(m) {
            let row = &p.cost[i * n + j0..i * n + j0 + w];
            for (k, c) in row.iter().enumerate() {
                mx[k] = mx[k].max((ui - c) * inv);
            }
        }
        let mut s = vec![0.0; w];
        for (i, ui) in u.iter().enumerate() {
            if *ui == f64::NEG_INFINITY {
                continue;
            }
            let row = &p.cost[i * n + j0..i * n + j0 + w];
            for (k, c) in row.iter().enumerate() {
                s[k] += ((ui - c) * inv - mx[k]).exp();
            }
        }
        for k in 0..w {
            chunk[k] = if mx[k] == f64::NEG_INFINITY { mx[k] } else { mx[k] + s[k].ln() };
        }
    });
    out
}

/// Alternating exact row and column projections in log space until the
/// L1 row-marginal error drops to `tol`.
pub fn sinkhorn_solve(p: &DiscreteEotProblem, tol: f64, max_iter: usize) -> Result<DiscreteCoupling> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tol = {tol} must be positive")));
    }
    let (m, n, eps) = (p.rows(), p.cols(), p.eps);
    let log_mu: Vec<f64> = p.mu.iter().map(|&w| ln_or_neg_inf(w)).collect();
    let log_nu: Vec<f64> = p.nu.iter().map(|&w| ln_or_neg_inf(w)).collect();
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    loop {
        let lse = row_lse(p, &v);
        if iterations > 0 {
            residual = u
                .iter()
                .zip(&lse)
                .zip(&p.mu)
                .map(|((ui, l), w)| {
                    let mass = if *ui == f64::NEG_INFINITY { 0.0 } else { (ui / eps + l).exp() };
                    (mass - w).abs()
                })
                .sum();
            history.push(residual);
            if residual <= tol {
                converged = true;
                break;
            }
        }
        if iterations == max_iter {
            break;
        }
        for i in 0..m {
            u[i] = if log_mu[i] == f64::NEG_INFINITY { f64::NEG_INFINITY } else { eps * (log_mu[i] - lse[i]) };
        }
        let lse = col_lse(p, &u);
        for j in 0..n {
            v[j] = if log_nu[j] == f64::NEG_INFINITY { f64::NEG_INFINITY } else { eps * (log_nu[j] - lse[j]) };
        }
        if u.iter().chain(&v).any(|x| x.is_nan()) {
            return Err(Error::NumericalFailure { t: iterations as f64, message: "NaN potential".into() });
        }
        iterations += 1;
    }
    let plan: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (u, v) = (&u, &v);
            (0..n).map(move |j| {
                let e = u[i] + v[j] - p.cost[i * n + j];
                if e == f64::NEG_INFINITY {
                    0.0
                } else {
                    (e / eps).exp()
                }
            })
        })
        .collect();
    Ok(DiscreteCoupling { plan, rows: m, cols: n, u, v, iterations, residual, residual_history: history, converged })
}

impl DiscreteCoupling {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.plan.chunks(self.cols) {
            for (a, b) in s.iter_mut().zip(r) {
                *a += b;
            }
        }
        s
    }

    /// Pearson correlation of `(x_i, y_j)` under the plan.
    pub fn correlation(&self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        if xs.len() != self.rows || ys.len() != self.cols {
            return Err(Error::Shape("grid does not match plan".into()));
        }
        let rs = self.row_sums();
        let cs = self.col_sums();
        let mx: f64 = xs.iter().zip(&rs).map(|(x, w)| x * w).sum();
        let my: f64 = ys.iter().zip(&cs).map(|(y, w)| y * w).sum();
        let vx: f64 = xs.iter().zip(&rs).map(|(x, w)| (x - mx).powi(2) * w).sum();
        let vy: f64 = ys.iter().zip(&cs).map(|(y, w)| (y - my).powi(2) * w).sum();
        let mut cxy = 0.0;
        for (i, r) in self.plan.chunks(self.cols).enumerate() {
            let dx = xs[i] - mx;
            cxy += dx * r.iter().zip(ys).map(|(p, y)| p * (y - my)).sum::<f64>();
        }
        if vx <= 0.0 || vy <= 0.0 {
            return Err(Error::Degenerate("plan marginal has zero variance".into()));
        }
        Ok(cxy / (vx * vy).sqrt())
    }

    /// CSV `x,y,mass` over every grid cell.
    pub fn write_csv<W: Write>(&self, mut w: W, xs: &[f64], ys: &[f64]) -> Result<()> {
        if xs.len() != self.rows || ys.len() != self.cols {
            return Err(Error::Shape("grid does not match plan".into()));
        }
        writeln!(w, "x,y,mass")?;
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                writeln!(w, "{x:.16e},{y:.16e},{:.16e}", self.at(i, j))?;
            }
        }
        Ok(())
    }

    /// PLV1: magic, `u32` rows, `u32` cols, then little-endian f64 plan entries.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"PLV1")?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.plan {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Reads a PLV1 stream into `(rows, cols, plan)`.
pub fn read_plan_binary<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != b"PLV1" {
        return Err(Error::Format("missing PLV1 magic".into()));
    }
    let rows = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format(format!("payload holds {} bytes, header implies {}", bytes.len(), rows * cols * 8)));
    }
    let plan = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((rows, cols, plan))
}

/// Midpoints of `bins` equal cells on `[lo, hi]`.
pub fn bin_centers(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let w = (hi - lo) / bins as f64;
    (0..bins).map(|i| lo + (i as f64 + 0.5) * w).collect()
}

/// Midpoint-rule masses at sorted, equally spaced `grid` points, renormalized.
/// Also returns the unnormalized total.
pub fn discretize_density(density: &dyn Fn(f64) -> f64, grid: &[f64]) -> Result<(Vec<f64>, f64)> {
    if grid.len() < 2 {
        return Err(Error::Domain("grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("grid must be strictly increasing".into()));
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    let mass: Vec<f64> = grid.iter().map(|&x| density(x).max(0.0) * h).collect();
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!("total mass {total}")));
    }
    Ok((mass.into_iter().map(|m| m / total).collect(), total))
}
