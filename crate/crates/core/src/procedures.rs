//! Training loops: iterated bridge matching (IDBM), diffusion IPF (DIPF)
//! and score-based generation (SGM).

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{domain, Error, Result};
use crate::gaussian::GaussianDist;
use crate::losses::{
    make_bdbm_batch, make_dbm_batch, make_drift_matching_batch, make_rf_batch, make_sgm_batch, weighted_mse, LossBatch,
    Sampler,
};
use crate::metrics::moment_summary;
use crate::mlp::{Adam, AdamConfig, DriftModel, Ema};
use crate::reference_sde::LinearRefSde;
use crate::rng::{derive_seed, seeded};
use crate::sde::{reverse_paths, simulate, CouplingSamples, Direction, DriftField, EulerConfig, PathBatch};

/// What the model regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetConvention {
    /// Conditional scores; the drift is assembled with the reference terms.
    Score,
    /// The drift itself, `(X_τ − X_t)/(τ − t)` forward or `(X_0 − X_t)/t`
    /// backward. Brownian references only.
    RectifiedFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionPolicy {
    ForwardOnly,
    BackwardOnly,
    /// Forward on odd iterations, backward on even ones.
    Alternate,
}

impl DirectionPolicy {
    /// Direction of iteration `i ≥ 1`.
    pub fn direction(self, i: usize) -> Direction {
        match self {
            Self::ForwardOnly => Direction::Forward,
            Self::BackwardOnly => Direction::Backward,
            Self::Alternate if i % 2 == 1 => Direction::Forward,
            Self::Alternate => Direction::Backward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sgd_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { sgd_steps: 5000, batch_size: 256, adam: AdamConfig::default(), ema_decay: 0.999 }
    }
}

/// Settings shared by all procedures.
#[derive(Debug, Clone)]
pub struct ProcedureConfig {
    pub sde: LinearRefSde,
    pub iterations: usize,
    pub train: TrainConfig,
    /// Euler steps on `[0, τ]`.
    pub m_steps: usize,
    pub policy: DirectionPolicy,
    pub convention: TargetConvention,
    /// Coupling pairs drawn per iteration, and paths simulated from it.
    pub n_samples: usize,
    /// Paths held in the DIPF cache.
    pub path_cache: usize,
    /// SGD steps between DIPF cache refreshes.
    pub cache_refresh: usize,
    /// Continue training the previous model of the same direction instead of
    /// a fresh initialization.
    pub warm_start: bool,
    pub deterministic_last_step: bool,
    pub seed: u64,
}

impl ProcedureConfig {
    pub fn new(sde: LinearRefSde, seed: u64) -> Self {
        Self {
            sde,
            iterations: 1,
            train: TrainConfig::default(),
            m_steps: 1000,
            policy: DirectionPolicy::Alternate,
            convention: TargetConvention::Score,
            n_samples: 10_000,
            path_cache: 1000,
            cache_refresh: 100,
            warm_start: false,
            deterministic_last_step: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batch_size", self.train.batch_size),
            ("m_steps", self.m_steps),
            ("n_samples", self.n_samples),
            ("path_cache", self.path_cache),
            ("cache_refresh", self.cache_refresh),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return domain(format!("{name} must be positive"));
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return domain(format!("ema_decay {} outside [0, 1)", self.train.ema_decay));
        }
        if !(self.train.adam.lr > 0.0) {
            return domain("learning rate must be positive");
        }
        if self.convention == TargetConvention::RectifiedFlow && !self.sde.is_scaled_brownian() {
            return domain("direct drift targets need a Brownian reference");
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.sde.tau() / self.m_steps as f64
    }

    fn euler(&self, seed: u64, reversed: bool) -> EulerConfig {
        EulerConfig {
            deterministic_last_step: self.deterministic_last_step,
            reversed_time: reversed,
            control_cost: true,
            ..EulerConfig::new(self.m_steps, seed)
        }
    }
}

/// Trained model plus the loss trace.
#[derive(Debug, Clone)]
pub struct Fit<M> {
    /// Model carrying the EMA parameters.
    pub snapshot: M,
    /// Model carrying the raw optimizer parameters.
    pub trained: M,
    pub losses: Vec<f64>,
}

impl<M> Fit<M> {
    /// Mean of the last (up to) 100 losses; NaN without training.
    pub fn final_loss(&self) -> f64 {
        let k = self.losses.len().min(100);
        if k == 0 {
            return f64::NAN;
        }
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Runs `cfg.sgd_steps` Adam steps on batches from `make_batch(step, rng)`.
pub fn fit_drift<M: DriftModel>(
    mut model: M,
    cfg: &TrainConfig,
    seed: u64,
    make_batch: &mut dyn FnMut(usize, &mut dyn RngCore) -> Result<LossBatch>,
) -> Result<Fit<M>> {
    let mut rng = seeded(seed);
    let mut adam = Adam::new(model.n_params(), cfg.adam.clone());
    let mut ema = Ema::with_warmup(model.params(), cfg.ema_decay);
    let mut losses = Vec::with_capacity(cfg.sgd_steps);
    for step in 0..cfg.sgd_steps {
        let batch = make_batch(step, &mut rng)?;
        let (pred, cache) = model.forward_cached(&batch.x_t, &batch.t)?;
        let (loss, grad_out) = weighted_mse(&pred, &batch)?;
        if !loss.is_finite() {
            return Err(Error::LossDiverged { step });
        }
        let grads = model.backward(&cache, &grad_out)?;
        model.update_params(&mut |p| adam.step(p, &grads));
        ema.update(model.params());
        losses.push(loss);
    }
    let mut snapshot = model.clone();
    snapshot.set_params(ema.shadow());
    Ok(Fit { snapshot, trained: model, losses })
}

/// Drift of a bridge-matching model in running time.
///
/// Forward: `−αβ_t x + β_t Σ s(x, t)`. Backward, at running time `t` with
/// physical time `r = τ − t`: `αβ_r x + β_r Σ s(x, r)`. Under the direct
/// convention the model output is used as is.
#[derive(Debug, Clone)]
pub struct ModelDrift<M> {
    model: M,
    sde: LinearRefSde,
    direction: Direction,
    convention: TargetConvention,
}

impl<M: DriftModel> ModelDrift<M> {
    pub fn new(model: M, sde: LinearRefSde, direction: Direction, convention: TargetConvention) -> Result<Self> {
        let d = sde.dim();
        if model.input_dim() != d + 1 || model.output_dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: model.output_dim() });
        }
        if convention == TargetConvention::RectifiedFlow && !sde.is_scaled_brownian() {
            return domain("direct drift targets need a Brownian reference");
        }
        Ok(Self { model, sde, direction, convention })
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

/// Assembles the drift of a trained bridge-matching model.
pub fn assemble_drift<M: DriftModel>(
    model: M,
    sde: &LinearRefSde,
    direction: Direction,
    convention: TargetConvention,
) -> Result<ModelDrift<M>> {
    ModelDrift::new(model, sde.clone(), direction, convention)
}

impl<M: DriftModel> DriftField for ModelDrift<M> {
    fn dim(&self) -> usize {
        self.sde.dim()
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.sde.dim();
        let phys = match self.direction {
            Direction::Forward => t,
            Direction::Backward => self.sde.tau() - t,
        };
        let ts = vec![phys; x.len() / d];
        let y = self.model.forward(x, &ts)?;
        match self.convention {
            TargetConvention::RectifiedFlow => out.copy_from_slice(&y),
            TargetConvention::Score => {
                let beta = self.sde.beta_at(phys);
                let lin = match self.direction {
                    Direction::Forward => -self.sde.alpha() * beta,
                    Direction::Backward => self.sde.alpha() * beta,
                };
                for ((xr, yr), or) in x.chunks_exact(d).zip(y.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
                    let s = self.sde.apply_cov(yr);
                    for j in 0..d {
                        or[j] = lin * xr[j] + beta * s[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// A model whose output is the drift in running time.
#[derive(Debug, Clone)]
pub struct RawDrift<M>(pub M);

impl<M: DriftModel> DriftField for RawDrift<M> {
    fn dim(&self) -> usize {
        self.0.output_dim()
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let ts = vec![t; x.len() / self.dim()];
        out.copy_from_slice(&self.0.forward(x, &ts)?);
        Ok(())
    }
}

struct ReferenceDrift<'a>(&'a LinearRefSde);

impl DriftField for ReferenceDrift<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.0.reference_drift(x, t));
        Ok(())
    }
}

/// One row of the per-iteration diagnostics table.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub direction: Direction,
    /// Mean of the last training losses.
    pub loss: f64,
    /// Control cost `∫‖u‖²_{Σ⁻¹}dt` averaged over simulated paths.
    pub l_oc: f64,
    /// `‖m̂ − m‖₂` between terminal samples and the target marginal.
    pub mean_error: f64,
    /// `‖Ĉ − C‖_F` likewise.
    pub cov_error: f64,
    pub wall_time: f64,
}

/// CSV with one row per iteration. Wall time is optional so that repeated
/// runs can be compared byte for byte.
pub fn write_diagnostics_csv<W: Write>(mut w: W, rows: &[IterationDiagnostics], wall_time: bool) -> Result<()> {
    write!(w, "iteration,direction,loss,l_oc,mean_error,cov_error")?;
    writeln!(w, "{}", if wall_time { ",wall_time" } else { "" })?;
    for r in rows {
        let dir = match r.direction {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        };
        write!(w, "{},{dir},{:.16e},{:.16e},{:.16e},{:.16e}", r.iteration, r.loss, r.l_oc, r.mean_error, r.cov_error)?;
        if wall_time {
            write!(w, ",{:.6}", r.wall_time)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn target_moments(s: &dyn Sampler, n: usize, seed: u64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if let Some(m) = s.moments() {
        return Ok(m);
    }
    let xs = s.sample(n.max(2), &mut seeded(seed));
    let m = moment_summary(&xs, s.dim())?;
    Ok((m.mean, m.cov))
}

fn moment_errors(samples: &[f64], target: &(DVector<f64>, DMatrix<f64>)) -> Result<(f64, f64)> {
    let m = moment_summary(samples, target.0.len())?;
    Ok(((m.mean - &target.0).norm(), (m.cov - &target.1).norm()))
}

fn tag(iteration: usize, phase: u64) -> u64 {
    (iteration as u64) << 32 | phase
}

fn check_samplers(sde: &LinearRefSde, gamma: &dyn Sampler, upsilon: &dyn Sampler) -> Result<()> {
    for s in [gamma, upsilon] {
        if s.dim() != sde.dim() {
            return Err(Error::DimensionMismatch { expected: sde.dim(), got: s.dim() });
        }
    }
    Ok(())
}

/// Artifacts of an IDBM run.
#[derive(Debug)]
pub struct IdbmRun<M> {
    /// `C⁽⁰⁾, C⁽¹⁾, ...`: endpoint pairs `(X_0, X_τ)`.
    pub couplings: Vec<CouplingSamples>,
    /// EMA snapshot of each iteration with its direction.
    pub models: Vec<(Direction, M)>,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Set when an iteration failed; earlier artifacts are kept.
    pub aborted: Option<Error>,
}

/// Iterated diffusion bridge mixture transport.
///
/// Each iteration fits a drift on bridge points drawn between the pairs of
/// the previous coupling, then simulates fresh paths from the start marginal
/// of the chosen direction to obtain the next coupling. `init` builds the
/// model for iteration `i` and direction.
pub fn run_idbm<M: DriftModel>(
    cfg: &ProcedureConfig,
    gamma: &dyn Sampler,
    upsilon: &dyn Sampler,
    initial: Option<CouplingSamples>,
    init: &dyn Fn(usize, Direction) -> Result<M>,
) -> Result<IdbmRun<M>> {
    cfg.validate()?;
    check_samplers(&cfg.sde, gamma, upsilon)?;
    let sde = &cfg.sde;
    let n = cfg.n_samples;
    let c0 = match initial {
        Some(c) => c,
        None => {
            let mut rng = seeded(derive_seed(cfg.seed, tag(0, 0)));
            let x0 = gamma.sample(n, &mut rng);
            let x1 = upsilon.sample(n, &mut rng);
            CouplingSamples::new(x0, x1, sde.dim())?
        }
    };
    let targets = [
        target_moments(gamma, n, derive_seed(cfg.seed, tag(0, 1)))?,
        target_moments(upsilon, n, derive_seed(cfg.seed, tag(0, 2)))?,
    ];
    let mut run = IdbmRun { couplings: vec![c0], models: Vec::new(), diagnostics: Vec::new(), aborted: None };
    let mut last_forward: Option<M> = None;
    let mut last_backward: Option<M> = None;
    for i in 1..=cfg.iterations {
        let dir = cfg.policy.direction(i);
        match idbm_iteration(cfg, i, dir, gamma, upsilon, &targets, &run.couplings[i - 1], {
            let prev = if dir == Direction::Forward { &last_forward } else { &last_backward };
            match prev {
                Some(m) if cfg.warm_start => Ok(m.clone()),
                _ => init(i, dir),
            }
        }) {
            Ok((coupling, fit, diag)) => {
                run.couplings.push(coupling);
                run.models.push((dir, fit.snapshot));
                run.diagnostics.push(diag);
                if dir == Direction::Forward {
                    last_forward = Some(fit.trained);
                } else {
                    last_backward = Some(fit.trained);
                }
            }
            Err(e) => {
                run.aborted = Some(e);
                break;
            }
        }
    }
    Ok(run)
}

type IterationOutput<M> = (CouplingSamples, Fit<M>, IterationDiagnostics);

fn idbm_iteration<M: DriftModel>(
    cfg: &ProcedureConfig,
    i: usize,
    dir: Direction,
    gamma: &dyn Sampler,
    upsilon: &dyn Sampler,
    targets: &[(DVector<f64>, DMatrix<f64>); 2],
    coupling: &CouplingSamples,
    model: Result<M>,
) -> Result<IterationOutput<M>> {
    let clock = Instant::now();
    let sde = &cfg.sde;
    let tau = sde.tau();
    let b = cfg.train.batch_size;
    let rf_t_max = tau - 0.5 * cfg.dt();
    let mut make = |_: usize, rng: &mut dyn RngCore| match (cfg.convention, dir) {
        (TargetConvention::Score, Direction::Forward) => make_dbm_batch(coupling, sde, b, rng, tau),
        (TargetConvention::Score, Direction::Backward) => make_bdbm_batch(coupling, sde, b, rng, tau),
        (TargetConvention::RectifiedFlow, _) => make_rf_batch(coupling, sde, b, rng, rf_t_max, dir),
    };
    let fit = fit_drift(model?, &cfg.train, derive_seed(cfg.seed, tag(i, 0)), &mut make)?;
    let drift = ModelDrift::new(fit.snapshot.clone(), sde.clone(), dir, cfg.convention)?;
    let (start, target) = match dir {
        Direction::Forward => (gamma, &targets[1]),
        Direction::Backward => (upsilon, &targets[0]),
    };
    let x_start = start.sample(cfg.n_samples, &mut seeded(derive_seed(cfg.seed, tag(i, 1))));
    let euler = cfg.euler(derive_seed(cfg.seed, tag(i, 2)), dir == Direction::Backward);
    let out = simulate(&drift, sde, &x_start, &euler, false, &[])?;
    let (mean_error, cov_error) = moment_errors(&out.endpoints.x_end, target)?;
    let coupling = match dir {
        Direction::Forward => out.endpoints,
        Direction::Backward => out.endpoints.swapped(),
    };
    let diag = IterationDiagnostics {
        iteration: i,
        direction: dir,
        loss: fit.final_loss(),
        l_oc: out.control_cost.unwrap_or(f64::NAN),
        mean_error,
        cov_error,
        wall_time: clock.elapsed().as_secs_f64(),
    };
    Ok((coupling, fit, diag))
}

/// Artifacts of a DIPF run.
#[derive(Debug)]
pub struct DipfRun<M> {
    /// EMA snapshot of iteration `i` (index `i − 1`), a drift in running time.
    pub models: Vec<M>,
    /// Endpoint pairs `(X_0, X_τ)` of each iterate in physical time.
    pub couplings: Vec<CouplingSamples>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub aborted: Option<Error>,
}

enum Process<'a, M> {
    Reference(ReferenceDrift<'a>),
    Fitted(RawDrift<M>),
}

impl<M: DriftModel> DriftField for Process<'_, M> {
    fn dim(&self) -> usize {
        match self {
            Self::Reference(r) => r.dim(),
            Self::Fitted(f) => f.dim(),
        }
    }

    fn eval_batch(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            Self::Reference(r) => r.eval_batch(x, t, out),
            Self::Fitted(f) => f.eval_batch(x, t, out),
        }
    }
}

/// Diffusion iterative proportional fitting.
///
/// Iteration 0 is the reference started from `gamma`. Iteration `i`
/// simulates iterate `i − 1`, reverses the cached paths, fits their drift by
/// drift matching and starts the new process from the other marginal: odd
/// iterates run from `upsilon` back to `gamma`, even ones from `gamma` to
/// `upsilon`. `init` builds a model taking running time.
pub fn run_dipf<M: DriftModel>(
    cfg: &ProcedureConfig,
    gamma: &dyn Sampler,
    upsilon: &dyn Sampler,
    init: &dyn Fn(usize) -> Result<M>,
) -> Result<DipfRun<M>> {
    cfg.validate()?;
    check_samplers(&cfg.sde, gamma, upsilon)?;
    let sde = &cfg.sde;
    let targets = [
        target_moments(gamma, cfg.n_samples, derive_seed(cfg.seed, tag(0, 1)))?,
        target_moments(upsilon, cfg.n_samples, derive_seed(cfg.seed, tag(0, 2)))?,
    ];
    let mut run = DipfRun { models: Vec::new(), couplings: Vec::new(), diagnostics: Vec::new(), aborted: None };
    let mut prev: Process<M> = Process::Reference(ReferenceDrift(sde));
    let mut warm: Option<M> = None;
    for i in 1..=cfg.iterations {
        let model = match &warm {
            Some(m) if cfg.warm_start && i >= 3 => Ok(m.clone()),
            _ => init(i),
        };
        match dipf_iteration(cfg, i, gamma, upsilon, &targets, &prev, model) {
            Ok((coupling, fit, diag)) => {
                run.couplings.push(coupling);
                run.models.push(fit.snapshot.clone());
                run.diagnostics.push(diag);
                // warm starts reuse the model two iterations back, which shares the direction
                warm = match prev {
                    Process::Fitted(RawDrift(m)) => Some(m),
                    Process::Reference(_) => None,
                };
                prev = Process::Fitted(RawDrift(fit.snapshot));
            }
            Err(e) => {
                run.aborted = Some(e);
                break;
            }
        }
    }
    Ok(run)
}

fn dipf_iteration<M: DriftModel>(
    cfg: &ProcedureConfig,
    i: usize,
    gamma: &dyn Sampler,
    upsilon: &dyn Sampler,
    targets: &[(DVector<f64>, DMatrix<f64>); 2],
    prev: &Process<M>,
    model: Result<M>,
) -> Result<IterationOutput<M>> {
    let clock = Instant::now();
    let sde = &cfg.sde;
    // iterate i − 1 starts from gamma when i − 1 is even
    let (prev_start, start, target) =
        if i % 2 == 1 { (gamma, upsilon, &targets[0]) } else { (upsilon, gamma, &targets[1]) };
    let prev_reversed = (i - 1) % 2 == 1;
    let mut cache: Option<PathBatch> = None;
    let mut refreshes = 0u64;
    let mut make = |step: usize, rng: &mut dyn RngCore| -> Result<LossBatch> {
        if step.is_multiple_of(cfg.cache_refresh) || cache.is_none() {
            let seed = derive_seed(cfg.seed, tag(i, 1000 + refreshes));
            refreshes += 1;
            let x0 = prev_start.sample(cfg.path_cache, &mut seeded(seed));
            let euler = cfg.euler(derive_seed(seed, 1), prev_reversed);
            let paths = simulate(prev, sde, &x0, &euler, true, &[])?.paths.expect("paths requested");
            cache = Some(reverse_paths(&paths));
        }
        make_drift_matching_batch(cache.as_ref().expect("cache filled"), cfg.train.batch_size, rng)
    };
    let fit = fit_drift(model?, &cfg.train, derive_seed(cfg.seed, tag(i, 0)), &mut make)?;
    let drift = RawDrift(fit.snapshot.clone());
    let x_start = start.sample(cfg.n_samples, &mut seeded(derive_seed(cfg.seed, tag(i, 1))));
    let reversed = i % 2 == 1;
    let out = simulate(&drift, sde, &x_start, &cfg.euler(derive_seed(cfg.seed, tag(i, 2)), reversed), false, &[])?;
    let (mean_error, cov_error) = moment_errors(&out.endpoints.x_end, target)?;
    let (direction, coupling) =
        if reversed { (Direction::Backward, out.endpoints.swapped()) } else { (Direction::Forward, out.endpoints) };
    let diag = IterationDiagnostics {
        iteration: i,
        direction,
        loss: fit.final_loss(),
        l_oc: out.control_cost.unwrap_or(f64::NAN),
        mean_error,
        cov_error,
        wall_time: clock.elapsed().as_secs_f64(),
    };
    Ok((coupling, fit, diag))
}

/// A trained score model and its generator.
#[derive(Debug)]
pub struct SgmRun<M> {
    pub model: M,
    pub losses: Vec<f64>,
    /// Terminal samples of the generative process.
    pub generated: Vec<f64>,
}

/// The terminal law of the reference started at the origin, `N(0, v(0,τ)Σ)`.
pub fn sgm_prior(sde: &LinearRefSde) -> Result<GaussianDist> {
    let v = sde.transition_moments(0.0, sde.tau())?.v;
    GaussianDist::new(DVector::zeros(sde.dim()), sde.sigma_cov() * v)
}

/// Denoising score matching on `gamma`, then `cfg.n_samples` generated
/// samples from the prior through the time-reversed dynamics.
pub fn run_sgm<M: DriftModel>(cfg: &ProcedureConfig, gamma: &dyn Sampler, model: M) -> Result<SgmRun<M>> {
    cfg.validate()?;
    let sde = &cfg.sde;
    if gamma.dim() != sde.dim() {
        return Err(Error::DimensionMismatch { expected: sde.dim(), got: gamma.dim() });
    }
    let b = cfg.train.batch_size;
    let mut make = |_: usize, rng: &mut dyn RngCore| make_sgm_batch(gamma, sde, b, rng);
    let fit = fit_drift(model, &cfg.train, derive_seed(cfg.seed, tag(1, 0)), &mut make)?;
    let prior = sgm_prior(sde)?;
    let generated = sgm_generate(&fit.snapshot, cfg, &prior, cfg.n_samples, derive_seed(cfg.seed, tag(1, 1)))?;
    Ok(SgmRun { model: fit.snapshot, losses: fit.losses, generated })
}

/// Samples `n` points by simulating the reversed dynamics from `prior`.
pub fn sgm_generate<M: DriftModel>(
    model: &M,
    cfg: &ProcedureConfig,
    prior: &dyn Sampler,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sde = &cfg.sde;
    let x0 = prior.sample(n, &mut seeded(derive_seed(seed, 0)));
    let drift = ModelDrift::new(model.clone(), sde.clone(), Direction::Backward, TargetConvention::Score)?;
    let mut euler = cfg.euler(derive_seed(seed, 1), true);
    euler.control_cost = false;
    Ok(simulate(&drift, sde, &x0, &euler, false, &[])?.endpoints.x_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Mlp, MlpSpec, TimeLinear};

    #[test]
    fn policy_parity() {
        assert_eq!(DirectionPolicy::Alternate.direction(1), Direction::Forward);
        assert_eq!(DirectionPolicy::Alternate.direction(2), Direction::Backward);
        assert_eq!(DirectionPolicy::BackwardOnly.direction(1), Direction::Backward);
    }

    #[test]
    fn zero_steps_returns_init() {
        let m = Mlp::init(&MlpSpec::new(1, vec![8], 4)).unwrap();
        let cfg = TrainConfig { sgd_steps: 0, ..Default::default() };
        let fit = fit_drift(m.clone(), &cfg, 1, &mut |_, _| unreachable!()).unwrap();
        assert_eq!(fit.snapshot.params(), m.params());
        assert!(fit.final_loss().is_nan());
    }

    #[test]
    fn nan_target_aborts_with_step() {
        let m = TimeLinear::zeros(1, 0, 1.0);
        let cfg = TrainConfig { sgd_steps: 10, batch_size: 1, ..Default::default() };
        let mut make = |step: usize, _: &mut dyn RngCore| {
            let v = if step == 3 { f64::NAN } else { 1.0 };
            Ok(LossBatch { x_t: vec![0.0], t: vec![0.5], target: vec![v], weight: vec![1.0], dim: 1 })
        };
        assert!(matches!(fit_drift(m, &cfg, 1, &mut make), Err(Error::LossDiverged { step: 3 })));
    }

    #[test]
    fn assembled_drift_reductions() {
        let sde = LinearRefSde::brownian(0.7, 1, 1.0).unwrap();
        // a constant score c gives drift σ²c
        let mut m = TimeLinear::zeros(1, 0, 1.0);
        m.set_params(&[0.0, 1.5]);
        let f = assemble_drift(m.clone(), &sde, Direction::Forward, TargetConvention::Score).unwrap();
        let mut out = [0.0];
        f.eval_batch(&[0.3], 0.2, &mut out).unwrap();
        assert!((out[0] - 0.49 * 1.5).abs() < 1e-15);
        let zero =
            assemble_drift(TimeLinear::zeros(1, 0, 1.0), &sde, Direction::Backward, TargetConvention::Score).unwrap();
        zero.eval_batch(&[0.3], 0.2, &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        let ou =
            LinearRefSde::new(0.5, DMatrix::identity(1, 1), crate::BetaSchedule::constant(2.0).unwrap(), 1.0).unwrap();
        let zero =
            assemble_drift(TimeLinear::zeros(1, 0, 1.0), &ou, Direction::Forward, TargetConvention::Score).unwrap();
        zero.eval_batch(&[0.3], 0.2, &mut out).unwrap();
        assert!((out[0] + 0.5 * 2.0 * 0.3).abs() < 1e-15);
        assert!(assemble_drift(m, &ou, Direction::Forward, TargetConvention::RectifiedFlow).is_err());
    }

    #[test]
    fn diagnostics_csv_columns() {
        let row = IterationDiagnostics {
            iteration: 1,
            direction: Direction::Backward,
            loss: 0.5,
            l_oc: 1.0,
            mean_error: 0.0,
            cov_error: 0.25,
            wall_time: 3.0,
        };
        let mut a = Vec::new();
        write_diagnostics_csv(&mut a, std::slice::from_ref(&row), false).unwrap();
        let s = String::from_utf8(a).unwrap();
        assert!(s.starts_with("iteration,direction,loss,l_oc,mean_error,cov_error\n1,backward,"));
        let mut b = Vec::new();
        write_diagnostics_csv(&mut b, &[row], true).unwrap();
        assert!(String::from_utf8(b).unwrap().lines().next().unwrap().ends_with(",wall_time"));
    }

    #[test]
    fn config_validation() {
        let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
        let mut cfg = ProcedureConfig::new(sde, 0);
        assert!(cfg.validate().is_ok());
        cfg.n_samples = 0;
        assert!(cfg.validate().is_err());
    }
}
