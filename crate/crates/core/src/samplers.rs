//! Toy endpoint distributions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{domain, Result};
use crate::losses::Sampler;
use crate::rng::fill_normal;

fn normal(rng: &mut dyn RngCore) -> f64 {
    let mut z = [0.0];
    fill_normal(rng, &mut z);
    z[0]
}

/// Two interleaved half circles, centred near the origin.
#[derive(Debug, Clone)]
pub struct TwoMoons {
    pub noise: f64,
}

impl Default for TwoMoons {
    fn default() -> Self {
        Self { noise: 0.1 }
    }
}

impl Sampler for TwoMoons {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let theta = std::f64::consts::PI * rng.random::<f64>();
            let (x, y) =
                if rng.random::<bool>() { (theta.cos(), theta.sin()) } else { (1.0 - theta.cos(), 0.5 - theta.sin()) };
            out.push(x - 0.5 + self.noise * normal(rng));
            out.push(y - 0.25 + self.noise * normal(rng));
        }
        out
    }
}

/// Two concentric noisy circles with equal mass.
#[derive(Debug, Clone)]
pub struct TwoRings {
    pub inner: f64,
    pub outer: f64,
    pub noise: f64,
}

impl Default for TwoRings {
    fn default() -> Self {
        Self { inner: 0.5, outer: 1.0, noise: 0.05 }
    }
}

impl Sampler for TwoRings {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let r = if rng.random::<bool>() { self.inner } else { self.outer };
            out.push(r * theta.cos() + self.noise * normal(rng));
            out.push(r * theta.sin() + self.noise * normal(rng));
        }
        out
    }
}

/// A Dirac mass.
#[derive(Debug, Clone)]
pub struct PointMass(pub Vec<f64>);

impl Sampler for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, n: usize, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.0.repeat(n)
    }

    fn moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let d = self.0.len();
        Some((DVector::from_column_slice(&self.0), DMatrix::zeros(d, d)))
    }
}

/// Uniform resampling of stored points.
#[derive(Debug, Clone)]
pub struct Empirical {
    points: Vec<f64>,
    dim: usize,
}

impl Empirical {
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return domain("empirical sampler needs a nonempty n × d buffer");
        }
        Ok(Self { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Sampler for Empirical {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let m = self.len();
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let i = rng.random_range(0..m);
            out.extend_from_slice(&self.points[i * self.dim..(i + 1) * self.dim]);
        }
        out
    }
}
