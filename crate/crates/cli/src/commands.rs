//! Subcommand implementations.

use std::fs;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::de::DeserializeOwned;

use bridgelab::gaussian::{eot_gaussian, idbm_kl_trajectory, ipf_kl_trajectory, sample_wishart};
use bridgelab::metrics::{correlation, histogram_2d, moment_summary, tv_histogram, write_density2d_csv, Kde1d, Source};
use bridgelab::mixture::{write_drift_grid, MixtureDbmDrift, MixtureReverseDrift};
use bridgelab::mlp::{Mlp, MlpSpec};
use bridgelab::procedures::{
    assemble_drift, run_dipf, run_idbm, run_sgm, write_diagnostics_csv, DirectionPolicy, IterationDiagnostics,
    ProcedureConfig, RawDrift, TargetConvention,
};
use bridgelab::rng::{derive_seed, seeded};
use bridgelab::sde::{simulate, EulerConfig};
use bridgelab::sinkhorn::{bin_centers, discretize_density, sinkhorn_solve, DiscreteEotProblem};
use bridgelab::{CouplingSamples, Direction, GaussianCoupling, GaussianDist, LinearRefSde};

use crate::config::{Gauss1dConfig, GaussNdConfig, Mixture1dConfig, ProcedureSettings, SgmConfig, SinkhornConfig};
use crate::output::{f, w, OutDir};
use crate::{CliError, Common};

fn load<T: DeserializeOwned>(c: &Common) -> Result<(T, Vec<u8>), CliError> {
    let bytes = match &c.config {
        Some(p) => fs::read(p).map_err(|e| CliError::io(p, e))?,
        None => b"{}".to_vec(),
    };
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config("config is not valid UTF-8".into()))?;
    let cfg = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, bytes))
}

fn dry_run_done(c: &Common, name: &str) -> bool {
    if c.dry_run {
        eprintln!("{name}: config ok (dry run)");
    }
    c.dry_run
}

fn write_diagnostics(out: &mut OutDir, name: &str, rows: &[IterationDiagnostics]) -> Result<(), CliError> {
    // wall-clock times go to stderr so the files stay reproducible
    for r in rows {
        eprintln!("iteration {} took {:.2}s", r.iteration, r.wall_time);
    }
    out.write(name, |wr| Ok(write_diagnostics_csv(wr, rows, false)?))
}

fn write_points(
    wr: &mut impl Write,
    header: &[String],
    rows: usize,
    row: impl Fn(usize) -> Vec<f64>,
) -> Result<(), CliError> {
    w(writeln!(wr, "{}", header.join(",")))?;
    for i in 0..rows {
        let line: Vec<String> = row(i).into_iter().map(f).collect();
        w(writeln!(wr, "{}", line.join(",")))?;
    }
    Ok(())
}

fn coupling_csv(wr: &mut impl Write, c: &CouplingSamples) -> Result<(), CliError> {
    let d = c.dim;
    let header: Vec<String> = (0..d).map(|j| format!("x0_{j}")).chain((0..d).map(|j| format!("x1_{j}"))).collect();
    write_points(wr, &header, c.len(), |i| [c.start(i), c.end(i)].concat())
}

fn abort_check(aborted: &Option<bridgelab::Error>, what: &str) -> Result<(), CliError> {
    match aborted {
        Some(e) => Err(CliError::Numerical(format!("{what} aborted: {e}"))),
        None => Ok(()),
    }
}

pub fn gauss1d(c: &Common) -> Result<(), CliError> {
    let (mut cfg, raw): (Gauss1dConfig, _) = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if dry_run_done(c, "gauss1d") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let g = GaussianDist::scalar(cfg.mean0, cfg.var0)?;
    let u = GaussianDist::scalar(cfg.mean1, cfg.var1)?;
    let mut rows = Vec::new();
    for &sigma in &cfg.sigmas {
        for (i, kl) in ipf_kl_trajectory(&g, &u, sigma, cfg.iterations)?.into_iter().enumerate() {
            rows.push(("ipf", sigma, f64::NAN, i + 1, kl));
        }
        for &rho in &cfg.rho_c0 {
            let cross = DMatrix::from_element(1, 1, rho * (cfg.var0 * cfg.var1).sqrt());
            let start = GaussianCoupling::new(g.clone(), u.clone(), cross)?;
            for (i, kl) in idbm_kl_trajectory(&start, sigma, cfg.iterations)?.into_iter().enumerate() {
                rows.push(("idbm", sigma, rho, i + 1, kl));
            }
        }
    }
    out.write("gauss1d.csv", |wr| {
        w(writeln!(wr, "procedure,sigma,rho_c0,iteration,kl"))?;
        for (p, s, r, i, kl) in &rows {
            w(writeln!(wr, "{p},{},{},{i},{}", f(*s), f(*r), f(*kl)))?;
        }
        Ok(())
    })?;
    out.finish("gauss1d", cfg.seed, &raw)
}

pub fn gaussnd(c: &Common) -> Result<(), CliError> {
    let (mut cfg, raw): (GaussNdConfig, _) = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if dry_run_done(c, "gaussnd") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let d = cfg.dim;
    let n = cfg.iterations;
    let mut rng = seeded(cfg.seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> GaussianDist {
        loop {
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let cov = sample_wishart(d, d, cfg.wishart_scale, rng);
            match GaussianDist::new(mean, cov) {
                Ok(g) => return g,
                Err(e) => eprintln!("resampling a Wishart draw: {e}"),
            }
        }
    };
    let mut rows = Vec::new();
    for s in 0..cfg.scenarios {
        let g = draw(&mut rng);
        let u = draw(&mut rng);
        let start = GaussianCoupling::independent(g.clone(), u.clone())?;
        rows.push((s, "idbm", idbm_kl_trajectory(&start, cfg.sigma, n)?));
        rows.push((s, "ipf", ipf_kl_trajectory(&g, &u, cfg.sigma, n)?));
    }
    out.write("gaussnd.csv", |wr| {
        w(writeln!(wr, "scenario,procedure,iteration,kl"))?;
        for (s, p, kls) in &rows {
            for (i, kl) in kls.iter().enumerate() {
                w(writeln!(wr, "{s},{p},{},{}", i + 1, f(*kl)))?;
            }
        }
        Ok(())
    })?;
    out.write("gaussnd_summary.csv", |wr| {
        w(writeln!(wr, "procedure,iteration,mean,min,max"))?;
        for p in ["idbm", "ipf"] {
            for i in 0..n {
                let vals: Vec<f64> = rows.iter().filter(|r| r.1 == p).map(|r| r.2[i]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                w(writeln!(wr, "{p},{},{},{},{}", i + 1, f(mean), f(min), f(max)))?;
            }
        }
        Ok(())
    })?;
    out.finish("gaussnd", cfg.seed, &raw)
}

fn coupling_density(
    out: &mut OutDir,
    name: &str,
    grid: &[Vec<f64>],
    xr: (f64, f64),
    yr: (f64, f64),
) -> Result<(), CliError> {
    let bins = grid.len();
    let xs = bin_centers(xr.0, xr.1, bins);
    let ys = bin_centers(yr.0, yr.1, bins);
    out.write(name, |wr| Ok(write_density2d_csv(wr, &xs, &ys, grid)?))
}

pub fn mixture1d(c: &Common) -> Result<(), CliError> {
    let (mut cfg, raw): (Mixture1dConfig, _) = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if dry_run_done(c, "mixture1d") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let gamma = cfg.gamma_mixture();
    let upsilon = cfg.upsilon_mixture();
    let sde = LinearRefSde::brownian(cfg.sigma, 1, 1.0)?;
    let xs = bin_centers(cfg.range.0, cfg.range.1, cfg.grid_points);
    let seed = |tag: u64| derive_seed(cfg.seed, tag);

    // analytic drifts of the generative direction, running time from Υ
    let exact_idbm = MixtureDbmDrift::new(gamma.clone(), upsilon.clone(), sde.clone(), Direction::Backward)?;
    let exact_dipf = MixtureReverseDrift { initial: gamma.clone(), sde: sde.clone() };
    out.write("drift_analytic_idbm.csv", |wr| Ok(write_drift_grid(wr, &exact_idbm, &xs, &cfg.drift_times)?))?;
    out.write("drift_analytic_dipf.csv", |wr| Ok(write_drift_grid(wr, &exact_dipf, &xs, &cfg.drift_times)?))?;
    let ups_x = upsilon.sample(cfg.n_samples, &mut seeded(seed(1)));
    let euler =
        EulerConfig { reversed_time: true, deterministic_last_step: true, ..EulerConfig::new(cfg.m_steps, seed(2)) };
    let ref_idbm = simulate(&exact_idbm, &sde, &ups_x, &euler, false, &[])?.endpoints.x_end;
    let ref_dipf = simulate(&exact_dipf, &sde, &ups_x, &euler, false, &[])?.endpoints.x_end;

    let mut pc = ProcedureConfig::new(sde.clone(), seed(3));
    pc.n_samples = cfg.n_samples;
    pc.m_steps = cfg.m_steps;
    pc.policy = DirectionPolicy::BackwardOnly;
    pc.convention = TargetConvention::RectifiedFlow;
    pc.train = cfg.train.build()?;
    pc.path_cache = cfg.path_cache;
    pc.cache_refresh = cfg.cache_refresh;
    let init_seed = seed(4);
    let idbm = run_idbm(&pc, &gamma, &upsilon, None, &|_, _| cfg.train.mlp(1, init_seed))?;
    abort_check(&idbm.aborted, "IDBM")?;
    let dipf = run_dipf(&pc, &gamma, &upsilon, &|_| cfg.train.mlp(1, init_seed))?;
    abort_check(&dipf.aborted, "DIPF")?;
    let nn_idbm = assemble_drift(idbm.models[0].1.clone(), &sde, Direction::Backward, TargetConvention::RectifiedFlow)?;
    let nn_dipf = RawDrift(dipf.models[0].clone());
    out.write("drift_nn_idbm.csv", |wr| Ok(write_drift_grid(wr, &nn_idbm, &xs, &cfg.drift_times)?))?;
    out.write("drift_nn_dipf.csv", |wr| Ok(write_drift_grid(wr, &nn_dipf, &xs, &cfg.drift_times)?))?;
    write_diagnostics(&mut out, "diagnostics_idbm.csv", &idbm.diagnostics)?;
    write_diagnostics(&mut out, "diagnostics_dipf.csv", &dipf.diagnostics)?;
    out.write("model_idbm.bin", |wr| Ok(idbm.models[0].1.write_checkpoint(wr)?))?;
    out.write("model_dipf.bin", |wr| Ok(dipf.models[0].write_checkpoint(wr)?))?;

    // terminal densities against Γ
    let idbm_coupling = &idbm.couplings[1];
    let terminals: [(&str, &[f64]); 4] = [
        ("analytic_idbm", &ref_idbm),
        ("analytic_dipf", &ref_dipf),
        ("nn_idbm", &idbm_coupling.x0),
        ("nn_dipf", &dipf.couplings[0].x0),
    ];
    let kdes =
        terminals.iter().map(|(_, s)| Kde1d::fit(s, cfg.kde_bandwidth)).collect::<bridgelab::Result<Vec<_>>>()?;
    let pdf = |x: f64| gamma.density(&[x]).expect("1D mixture");
    let mut tvs = Vec::new();
    for ((name, _), k) in terminals.iter().zip(&kdes) {
        tvs.push((*name, tv_histogram(&Source::Kde(k), &Source::Density(&pdf), cfg.tv_bins, cfg.range)?));
    }
    out.write("terminal_density.csv", |wr| {
        let mut header = vec!["x".to_string(), "gamma".to_string()];
        header.extend(terminals.iter().map(|(n, _)| n.to_string()));
        write_points(wr, &header, xs.len(), |i| {
            let x = xs[i];
            let mut row = vec![x, pdf(x)];
            row.extend(kdes.iter().map(|k| k.density(x)));
            row
        })
    })?;

    // couplings: IDBM samples against the discretized Sinkhorn plan
    let yr = cfg.sinkhorn_range;
    let grid_x = bin_centers(yr.0, yr.1, cfg.sinkhorn_bins);
    let (mu, _) = discretize_density(&pdf, &grid_x)?;
    let (nu, _) = discretize_density(&|y: f64| upsilon.density(&[y]).expect("1D mixture"), &grid_x)?;
    let problem = DiscreteEotProblem::squared_euclidean_1d(&grid_x, &grid_x, mu, nu, 2.0 * cfg.sigma * cfg.sigma)?;
    let plan = sinkhorn_solve(&problem, bridgelab::sinkhorn::DEFAULT_TOL, cfg.sinkhorn_max_iter)?;
    if !plan.converged {
        eprintln!("sinkhorn stopped after {} iterations at residual {:.3e}", plan.iterations, plan.residual);
    }
    let rho_sinkhorn = plan.correlation(&grid_x, &grid_x)?;
    let rho_idbm = correlation(&idbm_coupling.x0, &idbm_coupling.x_end)?;
    let cb = cfg.coupling_bins;
    let hist = histogram_2d(&idbm_coupling.x0, &idbm_coupling.x_end, cb, yr, yr)?;
    coupling_density(&mut out, "coupling_idbm.csv", &hist, yr, yr)?;
    let mut sk = vec![vec![0.0; cb]; cb];
    let width = (yr.1 - yr.0) / cb as f64;
    let cell = |v: f64| (((v - yr.0) / width) as usize).min(cb - 1);
    for (i, &x) in grid_x.iter().enumerate() {
        for (j, &y) in grid_x.iter().enumerate() {
            sk[cell(x)][cell(y)] += plan.at(i, j) / (width * width);
        }
    }
    coupling_density(&mut out, "coupling_sinkhorn.csv", &sk, yr, yr)?;
    out.write("summary.csv", |wr| {
        w(writeln!(wr, "metric,value"))?;
        for (name, tv) in &tvs {
            w(writeln!(wr, "tv_{name},{}", f(*tv)))?;
        }
        w(writeln!(wr, "correlation_idbm,{}", f(rho_idbm)))?;
        w(writeln!(wr, "correlation_sinkhorn,{}", f(rho_sinkhorn)))?;
        w(writeln!(wr, "sinkhorn_iterations,{}", plan.iterations))?;
        w(writeln!(wr, "sinkhorn_residual,{}", f(plan.residual)))?;
        Ok(())
    })?;
    out.finish("mixture1d", cfg.seed, &raw)
}

fn procedure_setup(c: &Common) -> Result<(ProcedureSettings, ProcedureConfig, Vec<u8>), CliError> {
    let (mut cfg, raw): (ProcedureSettings, _) = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let pc = cfg.build()?;
    Ok((cfg, pc, raw))
}

fn model_init(cfg: &ProcedureSettings, i: usize) -> bridgelab::Result<Mlp> {
    Mlp::init(&MlpSpec::new(cfg.dim(), cfg.train.hidden.clone(), derive_seed(cfg.seed, 1000 + i as u64)))
}

pub fn idbm(c: &Common) -> Result<(), CliError> {
    let (cfg, pc, raw) = procedure_setup(c)?;
    if dry_run_done(c, "idbm") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let (gamma, upsilon) = (cfg.gamma.build()?, cfg.upsilon.build()?);
    let run = run_idbm(&pc, &*gamma, &*upsilon, None, &|i, _| model_init(&cfg, i))?;
    write_diagnostics(&mut out, "diagnostics.csv", &run.diagnostics)?;
    for (i, (_, m)) in run.models.iter().enumerate() {
        out.write(&format!("model_{}.bin", i + 1), |wr| Ok(m.write_checkpoint(wr)?))?;
    }
    let last = run.couplings.last().expect("initial coupling");
    out.write("coupling_final.csv", |wr| coupling_csv(wr, last))?;
    abort_check(&run.aborted, "IDBM")?;
    out.finish("idbm", cfg.seed, &raw)
}

pub fn dipf(c: &Common) -> Result<(), CliError> {
    let (cfg, pc, raw) = procedure_setup(c)?;
    if dry_run_done(c, "dipf") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let (gamma, upsilon) = (cfg.gamma.build()?, cfg.upsilon.build()?);
    let run = run_dipf(&pc, &*gamma, &*upsilon, &|i| model_init(&cfg, i))?;
    write_diagnostics(&mut out, "diagnostics.csv", &run.diagnostics)?;
    for (i, m) in run.models.iter().enumerate() {
        out.write(&format!("model_{}.bin", i + 1), |wr| Ok(m.write_checkpoint(wr)?))?;
    }
    if let Some(last) = run.couplings.last() {
        out.write("coupling_final.csv", |wr| coupling_csv(wr, last))?;
    }
    abort_check(&run.aborted, "DIPF")?;
    out.finish("dipf", cfg.seed, &raw)
}

pub fn sgm_toy(c: &Common) -> Result<(), CliError> {
    let (mut cfg, raw): (SgmConfig, _) = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let pc = cfg.build()?;
    if dry_run_done(c, "sgm-toy") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let gamma = cfg.gamma.build()?;
    let d = gamma.dim();
    let model = Mlp::init(&MlpSpec::new(d, cfg.train.hidden.clone(), derive_seed(cfg.seed, 1000)))?;
    let run = run_sgm(&pc, &*gamma, model)?;
    out.write("losses.csv", |wr| {
        w(writeln!(wr, "step,loss"))?;
        for (i, l) in run.losses.iter().enumerate() {
            w(writeln!(wr, "{},{}", i + 1, f(*l)))?;
        }
        Ok(())
    })?;
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    out.write("generated.csv", |wr| {
        write_points(wr, &header, run.generated.len() / d, |i| run.generated[i * d..(i + 1) * d].to_vec())
    })?;
    let (tm, tc) = match gamma.moments() {
        Some(m) => m,
        None => {
            let s = moment_summary(&gamma.sample(pc.n_samples.max(2), &mut seeded(derive_seed(cfg.seed, 7))), d)?;
            (s.mean, s.cov)
        }
    };
    let gen = moment_summary(&run.generated, d)?;
    out.write("summary.csv", |wr| {
        w(writeln!(wr, "metric,value"))?;
        w(writeln!(wr, "mean_error,{}", f((gen.mean - &tm).norm())))?;
        w(writeln!(wr, "cov_error,{}", f((gen.cov - &tc).norm())))?;
        w(writeln!(
            wr,
            "final_loss,{}",
            f(run.losses.iter().rev().take(100).sum::<f64>() / run.losses.len().clamp(1, 100) as f64)
        ))?;
        Ok(())
    })?;
    out.write("model.bin", |wr| Ok(run.model.write_checkpoint(wr)?))?;
    out.finish("sgm-toy", cfg.seed, &raw)
}

pub fn sinkhorn_compare(c: &Common) -> Result<(), CliError> {
    let (mut cfg, raw): (SinkhornConfig, _) = load(c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if dry_run_done(c, "sinkhorn-compare") {
        return Ok(());
    }
    let mut out = OutDir::create(&c.out)?;
    let g = GaussianDist::scalar(cfg.mean0, cfg.var0)?;
    let u = GaussianDist::scalar(cfg.mean1, cfg.var1)?;
    let xs = bin_centers(cfg.range.0, cfg.range.1, cfg.bins);
    let normal = |m: f64, v: f64| move |x: f64| (-(x - m) * (x - m) / (2.0 * v)).exp();
    let (mu, _) = discretize_density(&normal(cfg.mean0, cfg.var0), &xs)?;
    let (nu, _) = discretize_density(&normal(cfg.mean1, cfg.var1), &xs)?;
    let mut rows = Vec::new();
    let mut histories = Vec::new();
    for &sigma in &cfg.sigmas {
        let eps = 2.0 * sigma * sigma;
        let p = DiscreteEotProblem::squared_euclidean_1d(&xs, &xs, mu.clone(), nu.clone(), eps)?;
        let plan = sinkhorn_solve(&p, cfg.tol, cfg.max_iter)?;
        let rho = plan.correlation(&xs, &xs)?;
        let exact = eot_gaussian(&g, &u, sigma)?.correlation_1d();
        eprintln!("sigma={sigma}: {} iterations, correlation {rho:.6} vs {exact:.6}", plan.iterations);
        histories.push((sigma, plan.residual_history.clone()));
        rows.push((sigma, eps, rho, exact, plan.iterations, plan.converged, plan.residual));
    }
    out.write("sinkhorn_compare.csv", |wr| {
        w(writeln!(wr, "sigma,eps,rho_sinkhorn,rho_closed_form,abs_error,iterations,converged,residual"))?;
        for (s, e, r, x, it, conv, res) in &rows {
            w(writeln!(wr, "{},{},{},{},{},{it},{conv},{}", f(*s), f(*e), f(*r), f(*x), f((r - x).abs()), f(*res)))?;
        }
        Ok(())
    })?;
    out.write("residual_history.csv", |wr| {
        w(writeln!(wr, "sigma,iteration,residual"))?;
        for (s, h) in &histories {
            for (i, r) in h.iter().enumerate() {
                w(writeln!(wr, "{},{},{}", f(*s), i + 1, f(*r)))?;
            }
        }
        Ok(())
    })?;
    out.finish("sinkhorn-compare", cfg.seed, &raw)
}
