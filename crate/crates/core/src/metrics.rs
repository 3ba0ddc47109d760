//! Kernel density estimates, binned total variation and moment summaries.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Gaussian-kernel density estimate in one dimension.
#[derive(Debug, Clone)]
pub struct Kde1d {
    sorted: Vec<f64>,
    bandwidth: f64,
}

impl Kde1d {
    /// Fits with the given bandwidth, or Silverman's `1.06·sd·n^{-1/5}`.
    pub fn fit(samples: &[f64], bandwidth: Option<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Degenerate("kde needs at least two samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite sample".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let h = match bandwidth {
            Some(h) if h > 0.0 && h.is_finite() => h,
            Some(h) => return Err(Error::Degenerate(format!("bandwidth {h} is not positive"))),
            None => {
                if sd == 0.0 {
                    return Err(Error::Degenerate("all samples are equal".into()));
                }
                1.06 * sd * n.powf(-0.2)
            }
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted, bandwidth: h })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn window(&self, x: f64) -> (usize, usize) {
        let r = 8.5 * self.bandwidth;
        let lo = self.sorted.partition_point(|&s| s < x - r);
        let hi = self.sorted.partition_point(|&s| s <= x + r);
        (lo, hi)
    }

    pub fn density(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let h = self.bandwidth;
        // fold from +0 so an empty window gives +0 rather than -0
        let s = self.sorted[lo..hi].iter().fold(0.0, |acc, &s| acc + (-0.5 * ((x - s) / h).powi(2)).exp());
        s / (self.sorted.len() as f64 * h * SQRT_2PI)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let h = self.bandwidth;
        let s: f64 = self.sorted[lo..hi].iter().map(|&s| normal_cdf((x - s) / h)).sum();
        (lo as f64 + s) / self.sorted.len() as f64
    }
}

/// One side of a binned comparison.
pub enum Source<'a> {
    Samples(&'a [f64]),
    Density(&'a dyn Fn(f64) -> f64),
    Kde(&'a Kde1d),
}

/// Uniform bin edges over `range`.
pub fn bin_edges(bins: usize, range: (f64, f64)) -> Vec<f64> {
    (0..=bins).map(|i| range.0 + (range.1 - range.0) * i as f64 / bins as f64).collect()
}

/// Probability mass per bin; mass outside `range` is dropped.
pub fn bin_masses(src: &Source, bins: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    if bins == 0 || !(range.1 > range.0) {
        return Err(Error::Domain(format!("bad binning: {bins} bins on {range:?}")));
    }
    let edges = bin_edges(bins, range);
    match src {
        Source::Samples(xs) => {
            if xs.is_empty() {
                return Err(Error::Degenerate("empty sample".into()));
            }
            let mut counts = vec![0.0; bins];
            let w = (range.1 - range.0) / bins as f64;
            for &x in xs.iter() {
                if x >= range.0 && x < range.1 {
                    let i = (((x - range.0) / w) as usize).min(bins - 1);
                    counts[i] += 1.0;
                } else if x == range.1 {
                    counts[bins - 1] += 1.0;
                }
            }
            Ok(counts.into_iter().map(|c| c / xs.len() as f64).collect())
        }
        Source::Density(f) => Ok(edges.windows(2).map(|e| simpson(*f, e[0], e[1], 16)).collect()),
        Source::Kde(k) => {
            let c: Vec<f64> = edges.iter().map(|&e| k.cdf(e)).collect();
            Ok(c.windows(2).map(|w| w[1] - w[0]).collect())
        }
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `½ Σ |p_i − q_i|` over a shared uniform binning.
pub fn tv_histogram(a: &Source, b: &Source, bins: usize, range: (f64, f64)) -> Result<f64> {
    let p = bin_masses(a, bins, range)?;
    let q = bin_masses(b, bins, range)?;
    Ok(0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Sample moments of an `n × d` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Standard error of each mean coordinate.
    pub std_err: DVector<f64>,
    pub n: usize,
}

pub fn moment_summary(samples: &[f64], d: usize) -> Result<MomentSummary> {
    if d == 0 || !samples.len().is_multiple_of(d) {
        return Err(Error::Shape(format!("{} values in dimension {d}", samples.len())));
    }
    let n = samples.len() / d;
    if n < 2 {
        return Err(Error::Degenerate("moments need at least two samples".into()));
    }
    let mut mean = DVector::zeros(d);
    for row in samples.chunks_exact(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in samples.chunks_exact(d) {
        for i in 0..d {
            let a = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += a * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            cov[(i, j)] /= (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let std_err = DVector::from_iterator(d, (0..d).map(|i| (cov[(i, i)] / n as f64).sqrt()));
    Ok(MomentSummary { mean, cov, std_err, n })
}

/// Sample cross-covariance `Cov(a, b)` of two paired `n × d` batches.
pub fn cross_covariance(a: &[f64], b: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if a.len() != b.len() || d == 0 || !a.len().is_multiple_of(d) || a.len() < 2 * d {
        return Err(Error::Shape("paired samples of unequal or too small size".into()));
    }
    let n = a.len() / d;
    let ma = moment_summary(a, d)?.mean;
    let mb = moment_summary(b, d)?.mean;
    let mut c = DMatrix::zeros(d, d);
    for (ra, rb) in a.chunks_exact(d).zip(b.chunks_exact(d)) {
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += (ra[i] - ma[i]) * (rb[j] - mb[j]);
            }
        }
    }
    Ok(c / (n - 1) as f64)
}

/// Pearson correlation of two scalar samples.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    let c = cross_covariance(a, b, 1)?[(0, 0)];
    let va = moment_summary(a, 1)?.cov[(0, 0)];
    let vb = moment_summary(b, 1)?.cov[(0, 0)];
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("constant sample".into()));
    }
    Ok(c / (va * vb).sqrt())
}

/// Normalized 2D histogram density on `bins × bins` cells, indexed `[ix][iy]`.
pub fn histogram_2d(x: &[f64], y: &[f64], bins: usize, xr: (f64, f64), yr: (f64, f64)) -> Result<Vec<Vec<f64>>> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Degenerate("paired samples must be nonempty and equal length".into()));
    }
    let (wx, wy) = ((xr.1 - xr.0) / bins as f64, (yr.1 - yr.0) / bins as f64);
    let mut grid = vec![vec![0.0; bins]; bins];
    for (&a, &b) in x.iter().zip(y) {
        if a >= xr.0 && a < xr.1 && b >= yr.0 && b < yr.1 {
            let i = (((a - xr.0) / wx) as usize).min(bins - 1);
            let j = (((b - yr.0) / wy) as usize).min(bins - 1);
            grid[i][j] += 1.0;
        }
    }
    let norm = x.len() as f64 * wx * wy;
    for row in &mut grid {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(grid)
}

/// CSV `x,density`.
pub fn write_density_csv<W: Write>(mut w: W, xs: &[f64], density: &[f64]) -> Result<()> {
    if xs.len() != density.len() {
        return Err(Error::Shape("grid and values differ in length".into()));
    }
    writeln!(w, "x,density")?;
    for (x, v) in xs.iter().zip(density) {
        writeln!(w, "{x:.16e},{v:.16e}")?;
    }
    Ok(())
}

/// CSV `x,y,density` with `grid[ix][iy]`.
pub fn write_density2d_csv<W: Write>(mut w: W, xs: &[f64], ys: &[f64], grid: &[Vec<f64>]) -> Result<()> {
    if grid.len() != xs.len() || grid.iter().any(|r| r.len() != ys.len()) {
        return Err(Error::Shape("grid does not match axes".into()));
    }
    writeln!(w, "x,y,density")?;
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            writeln!(w, "{x:.16e},{y:.16e},{:.16e}", grid[i][j])?;
        }
    }
    Ok(())
}
