//! JSON experiment configurations.
//!
//! Every document carries `"schema": "bridgelab/v1"`; unknown keys are
//! rejected and omitted keys take the defaults below.

use nalgebra::DMatrix;
use serde::Deserialize;

use bridgelab::losses::Sampler;
use bridgelab::mixture::GaussianMixture;
use bridgelab::mlp::{AdamConfig, Mlp, MlpSpec};
use bridgelab::procedures::{DirectionPolicy, ProcedureConfig, TargetConvention, TrainConfig};
use bridgelab::samplers::{PointMass, TwoMoons, TwoRings};
use bridgelab::{BetaSchedule, GaussianDist, LinearRefSde};

use crate::CliError;

pub const SCHEMA: &str = "bridgelab/v1";

fn check_schema(s: &str) -> Result<(), CliError> {
    if s != SCHEMA {
        return Err(CliError::Config(format!("unsupported schema {s:?}, expected {SCHEMA:?}")));
    }
    Ok(())
}

fn require(cond: bool, msg: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Config(msg.to_string()))
    }
}

fn positive(v: f64, name: &str) -> Result<(), CliError> {
    require(v.is_finite() && v > 0.0, &format!("{name} must be positive and finite"))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Schedule {
    Constant(f64),
    Ve { sigma_min: f64, sigma_max: f64 },
}

/// `dX = −αβ_t X dt + σ√β_t dW` on `[0, τ]` in `dim` dimensions.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub schedule: Schedule,
    pub tau: f64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self { alpha: 0.0, sigma: 1.0, schedule: Schedule::Constant(1.0), tau: 1.0 }
    }
}

impl SdeConfig {
    pub fn build(&self, dim: usize) -> Result<LinearRefSde, CliError> {
        positive(self.sigma, "sde.sigma")?;
        let beta = match self.schedule {
            Schedule::Constant(c) => BetaSchedule::constant(c),
            Schedule::Ve { sigma_min, sigma_max } => BetaSchedule::ve(sigma_min, sigma_max),
        }
        .map_err(|e| CliError::Config(e.to_string()))?;
        let cov = DMatrix::identity(dim, dim) * (self.sigma * self.sigma);
        LinearRefSde::new(self.alpha, cov, beta, self.tau).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Endpoint distributions.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DistConfig {
    /// Isotropic Gaussian `N(mean, var·I)`.
    Gaussian {
        mean: Vec<f64>,
        var: f64,
    },
    /// Isotropic mixture; `means` holds one vector per component.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<f64>,
    },
    TwoMoons {
        #[serde(default = "default_moon_noise")]
        noise: f64,
    },
    TwoRings {
        #[serde(default = "default_inner")]
        inner: f64,
        #[serde(default = "default_outer")]
        outer: f64,
        #[serde(default = "default_ring_noise")]
        noise: f64,
    },
    Point {
        x: Vec<f64>,
    },
}

fn default_moon_noise() -> f64 {
    0.1
}
fn default_inner() -> f64 {
    0.5
}
fn default_outer() -> f64 {
    1.0
}
fn default_ring_noise() -> f64 {
    0.05
}

impl DistConfig {
    pub fn build(&self) -> Result<Box<dyn Sampler>, CliError> {
        let cfg = |e: bridgelab::Error| CliError::Config(e.to_string());
        Ok(match self {
            Self::Gaussian { mean, var } => {
                positive(*var, "gaussian var")?;
                require(!mean.is_empty(), "gaussian mean must be nonempty")?;
                let d = mean.len();
                Box::new(GaussianDist::new(mean.clone().into(), DMatrix::identity(d, d) * *var).map_err(cfg)?)
            }
            Self::Mixture { weights, means, vars } => {
                Box::new(GaussianMixture::new(weights.clone(), means.clone(), vars.clone()).map_err(cfg)?)
            }
            Self::TwoMoons { noise } => {
                require(*noise >= 0.0, "two_moons noise must be nonnegative")?;
                Box::new(TwoMoons { noise: *noise })
            }
            Self::TwoRings { inner, outer, noise } => {
                require(*inner > 0.0 && outer > inner && *noise >= 0.0, "two_rings needs 0 < inner < outer")?;
                Box::new(TwoRings { inner: *inner, outer: *outer, noise: *noise })
            }
            Self::Point { x } => {
                require(!x.is_empty(), "point needs coordinates")?;
                Box::new(PointMass(x.clone()))
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Mixture { means, .. } => means.first().map_or(0, Vec::len),
            Self::TwoMoons { .. } | Self::TwoRings { .. } => 2,
            Self::Point { x } => x.len(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub sgd_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { sgd_steps: 5000, batch_size: 256, lr: 1e-3, ema_decay: 0.999, hidden: vec![128, 128, 128] }
    }
}

impl TrainSettings {
    pub fn build(&self) -> Result<TrainConfig, CliError> {
        positive(self.lr, "train.lr")?;
        require(self.batch_size > 0, "train.batch_size must be positive")?;
        require((0.0..1.0).contains(&self.ema_decay), "train.ema_decay must lie in [0, 1)")?;
        Ok(TrainConfig {
            sgd_steps: self.sgd_steps,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..Default::default() },
            ema_decay: self.ema_decay,
        })
    }

    pub fn mlp(&self, dim: usize, seed: u64) -> bridgelab::Result<Mlp> {
        Mlp::init(&MlpSpec::new(dim, self.hidden.clone(), seed))
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    ForwardOnly,
    BackwardOnly,
    Alternate,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Score,
    RectifiedFlow,
}

/// Settings of `gauss1d`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gauss1dConfig {
    pub schema: String,
    pub seed: u64,
    pub mean0: f64,
    pub mean1: f64,
    pub var0: f64,
    pub var1: f64,
    pub sigmas: Vec<f64>,
    pub rho_c0: Vec<f64>,
    pub iterations: usize,
}

impl Default for Gauss1dConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            seed: 0,
            mean0: -1.0,
            mean1: 1.0,
            var0: 1.0,
            var1: 1.0,
            sigmas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            rho_c0: vec![-1.0, 0.0, 1.0],
            iterations: 20,
        }
    }
}

impl Gauss1dConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check_schema(&self.schema)?;
        positive(self.var0, "var0")?;
        positive(self.var1, "var1")?;
        require(!self.sigmas.is_empty(), "sigmas must be nonempty")?;
        for &s in &self.sigmas {
            positive(s, "sigma")?;
        }
        for &r in &self.rho_c0 {
            require((-1.0..=1.0).contains(&r), "rho_c0 entries must lie in [-1, 1]")?;
        }
        require(self.iterations > 0, "iterations must be positive")
    }
}

/// Settings of `gaussnd`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussNdConfig {
    pub schema: String,
    pub seed: u64,
    pub dim: usize,
    pub sigma: f64,
    pub scenarios: usize,
    pub iterations: usize,
    pub wishart_scale: f64,
}

impl Default for GaussNdConfig {
    fn default() -> Self {
        Self { schema: SCHEMA.into(), seed: 0, dim: 5, sigma: 0.2, scenarios: 20, iterations: 20, wishart_scale: 0.2 }
    }
}

impl GaussNdConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check_schema(&self.schema)?;
        require(
            self.dim > 0 && self.scenarios > 0 && self.iterations > 0,
            "dim, scenarios, iterations must be positive",
        )?;
        positive(self.sigma, "sigma")?;
        positive(self.wishart_scale, "wishart_scale")
    }
}

/// Settings of `mixture1d`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mixture1dConfig {
    pub schema: String,
    pub seed: u64,
    pub gamma: DistConfig,
    pub upsilon: DistConfig,
    pub sigma: f64,
    pub n_samples: usize,
    pub m_steps: usize,
    pub train: TrainSettings,
    pub path_cache: usize,
    pub cache_refresh: usize,
    pub kde_bandwidth: Option<f64>,
    pub tv_bins: usize,
    pub range: (f64, f64),
    pub grid_points: usize,
    pub drift_times: Vec<f64>,
    pub sinkhorn_bins: usize,
    pub sinkhorn_range: (f64, f64),
    pub sinkhorn_max_iter: usize,
    pub coupling_bins: usize,
}

impl Default for Mixture1dConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            seed: 0,
            gamma: DistConfig::Mixture {
                weights: vec![1.0 / 3.0; 3],
                means: vec![vec![-3.0], vec![0.5], vec![3.0]],
                vars: vec![0.04; 3],
            },
            upsilon: DistConfig::Gaussian { mean: vec![0.0], var: 4.0 },
            sigma: 0.2,
            n_samples: 100_000,
            m_steps: 1000,
            train: TrainSettings { sgd_steps: 10_000, ..Default::default() },
            path_cache: 1000,
            cache_refresh: 100,
            kde_bandwidth: Some(0.04),
            tv_bins: 200,
            range: (-5.0, 5.0),
            grid_points: 201,
            drift_times: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            sinkhorn_bins: 500,
            sinkhorn_range: (-8.0, 8.0),
            sinkhorn_max_iter: 100_000,
            coupling_bins: 100,
        }
    }
}

impl Mixture1dConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check_schema(&self.schema)?;
        require(matches!(self.gamma, DistConfig::Mixture { .. }), "gamma must be a mixture")?;
        require(
            matches!(self.upsilon, DistConfig::Mixture { .. } | DistConfig::Gaussian { .. }),
            "upsilon must be a Gaussian or a mixture",
        )?;
        require(self.gamma.dim() == 1 && self.upsilon.dim() == 1, "mixture1d needs one-dimensional endpoints")?;
        self.gamma.build()?;
        self.upsilon.build()?;
        positive(self.sigma, "sigma")?;
        if let Some(h) = self.kde_bandwidth {
            positive(h, "kde_bandwidth")?;
        }
        require(self.n_samples >= 2 && self.m_steps > 0, "n_samples >= 2 and m_steps > 0 required")?;
        require(self.path_cache > 0 && self.cache_refresh > 0, "path_cache and cache_refresh must be positive")?;
        require(self.tv_bins > 0 && self.grid_points > 1, "tv_bins and grid_points must be positive")?;
        require(self.range.0 < self.range.1 && self.sinkhorn_range.0 < self.sinkhorn_range.1, "empty range")?;
        require(self.sinkhorn_bins > 1 && self.coupling_bins > 0, "bin counts must be positive")?;
        require(self.drift_times.iter().all(|&t| t > 0.0 && t < 1.0), "drift_times must lie in (0, 1)")?;
        self.train.build().map(|_| ())
    }

    pub fn gamma_mixture(&self) -> GaussianMixture {
        to_mixture(&self.gamma).expect("validated")
    }

    pub fn upsilon_mixture(&self) -> GaussianMixture {
        to_mixture(&self.upsilon).expect("validated")
    }
}

fn to_mixture(d: &DistConfig) -> Option<GaussianMixture> {
    match d {
        DistConfig::Mixture { weights, means, vars } => {
            GaussianMixture::new(weights.clone(), means.clone(), vars.clone()).ok()
        }
        DistConfig::Gaussian { mean, var } => GaussianMixture::new(vec![1.0], vec![mean.clone()], vec![*var]).ok(),
        _ => None,
    }
}

/// Settings of `idbm` and `dipf`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcedureSettings {
    pub schema: String,
    pub seed: u64,
    pub gamma: DistConfig,
    pub upsilon: DistConfig,
    pub sde: SdeConfig,
    pub iterations: usize,
    pub m_steps: usize,
    pub policy: Policy,
    pub convention: Convention,
    pub n_samples: usize,
    pub path_cache: usize,
    pub cache_refresh: usize,
    pub warm_start: bool,
    pub deterministic_last_step: bool,
    pub train: TrainSettings,
}

impl Default for ProcedureSettings {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            seed: 0,
            gamma: DistConfig::TwoMoons { noise: 0.1 },
            upsilon: DistConfig::TwoRings { inner: 0.5, outer: 1.0, noise: 0.05 },
            sde: SdeConfig::default(),
            iterations: 4,
            m_steps: 100,
            policy: Policy::Alternate,
            convention: Convention::RectifiedFlow,
            n_samples: 5000,
            path_cache: 1000,
            cache_refresh: 100,
            warm_start: true,
            deterministic_last_step: true,
            train: TrainSettings { sgd_steps: 2000, hidden: vec![64, 64], ..Default::default() },
        }
    }
}

impl ProcedureSettings {
    pub fn dim(&self) -> usize {
        self.gamma.dim()
    }

    pub fn build(&self) -> Result<ProcedureConfig, CliError> {
        check_schema(&self.schema)?;
        require(self.gamma.dim() == self.upsilon.dim(), "gamma and upsilon dimensions differ")?;
        self.gamma.build()?;
        self.upsilon.build()?;
        let sde = self.sde.build(self.dim())?;
        let mut cfg = ProcedureConfig::new(sde, self.seed);
        cfg.iterations = self.iterations;
        cfg.m_steps = self.m_steps;
        cfg.policy = match self.policy {
            Policy::ForwardOnly => DirectionPolicy::ForwardOnly,
            Policy::BackwardOnly => DirectionPolicy::BackwardOnly,
            Policy::Alternate => DirectionPolicy::Alternate,
        };
        cfg.convention = match self.convention {
            Convention::Score => TargetConvention::Score,
            Convention::RectifiedFlow => TargetConvention::RectifiedFlow,
        };
        cfg.n_samples = self.n_samples;
        cfg.path_cache = self.path_cache;
        cfg.cache_refresh = self.cache_refresh;
        cfg.warm_start = self.warm_start;
        cfg.deterministic_last_step = self.deterministic_last_step;
        cfg.train = self.train.build()?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.convention == TargetConvention::RectifiedFlow && !cfg.sde.is_scaled_brownian() {
            return Err(CliError::Config("rectified_flow needs alpha = 0 and a constant schedule".into()));
        }
        Ok(cfg)
    }
}

/// Settings of `sgm-toy`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgmConfig {
    pub schema: String,
    pub seed: u64,
    pub gamma: DistConfig,
    pub sde: SdeConfig,
    pub m_steps: usize,
    pub n_samples: usize,
    pub train: TrainSettings,
}

impl Default for SgmConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            seed: 0,
            gamma: DistConfig::TwoMoons { noise: 0.1 },
            sde: SdeConfig { schedule: Schedule::Ve { sigma_min: 0.01, sigma_max: 3.0 }, ..Default::default() },
            m_steps: 500,
            n_samples: 5000,
            train: TrainSettings { sgd_steps: 5000, hidden: vec![64, 64], ..Default::default() },
        }
    }
}

impl SgmConfig {
    pub fn build(&self) -> Result<ProcedureConfig, CliError> {
        check_schema(&self.schema)?;
        self.gamma.build()?;
        let sde = self.sde.build(self.gamma.dim())?;
        let mut cfg = ProcedureConfig::new(sde, self.seed);
        cfg.m_steps = self.m_steps;
        cfg.n_samples = self.n_samples;
        cfg.train = self.train.build()?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Settings of `sinkhorn-compare`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub schema: String,
    pub seed: u64,
    pub mean0: f64,
    pub mean1: f64,
    pub var0: f64,
    pub var1: f64,
    pub sigmas: Vec<f64>,
    pub bins: usize,
    pub range: (f64, f64),
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            seed: 0,
            mean0: 0.0,
            mean1: 0.0,
            var0: 1.0,
            var1: 1.0,
            sigmas: vec![0.2, 1.0],
            bins: 2000,
            range: (-6.0, 6.0),
            tol: bridgelab::sinkhorn::DEFAULT_TOL,
            max_iter: 100_000,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check_schema(&self.schema)?;
        positive(self.var0, "var0")?;
        positive(self.var1, "var1")?;
        require(!self.sigmas.is_empty(), "sigmas must be nonempty")?;
        for &s in &self.sigmas {
            positive(s, "sigma")?;
        }
        require(self.bins > 1 && self.range.0 < self.range.1, "need bins > 1 and a nonempty range")?;
        positive(self.tol, "tol")?;
        require(self.max_iter > 0, "max_iter must be positive")
    }
}
