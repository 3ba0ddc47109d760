use bridgelab::gaussian::{idbm_step_gaussian, GaussianCoupling};
use bridgelab::metrics::correlation;
use bridgelab::mlp::{AdamConfig, TimeLinear};
use bridgelab::procedures::{run_idbm, DirectionPolicy, ProcedureConfig, TargetConvention, TrainConfig};
use bridgelab::{GaussianDist, LinearRefSde};

fn gaussian_config(seed: u64) -> ProcedureConfig {
    let sde = LinearRefSde::brownian(1.0, 1, 1.0).unwrap();
    let mut cfg = ProcedureConfig::new(sde, seed);
    cfg.iterations = 3;
    cfg.m_steps = 500;
    cfg.n_samples = 100_000;
    cfg.policy = DirectionPolicy::Alternate;
    cfg.train = TrainConfig {
        sgd_steps: 3000,
        batch_size: 512,
        adam: AdamConfig { lr: 1e-2, ..Default::default() },
        ema_decay: 0.995,
    };
    cfg
}

#[test]
fn idbm_tracks_closed_form_correlations() {
    let gamma = GaussianDist::scalar(-1.0, 1.0).unwrap();
    let upsilon = GaussianDist::scalar(1.0, 1.0).unwrap();
    for convention in [TargetConvention::Score, TargetConvention::RectifiedFlow] {
        let mut cfg = gaussian_config(11);
        cfg.convention = convention;
        let run = run_idbm(&cfg, &gamma, &upsilon, None, &|_, _| Ok(TimeLinear::zeros(1, 6, 1.0))).unwrap();
        assert!(run.aborted.is_none());
        let mut exact = GaussianCoupling::independent(gamma.clone(), upsilon.clone()).unwrap();
        for c in run.couplings.iter().skip(1) {
            exact = idbm_step_gaussian(&exact, 1.0).unwrap();
            let rho = correlation(&c.x0, &c.x_end).unwrap();
            assert!((rho - exact.correlation_1d()).abs() < 0.02);
        }
    }
}

fn fitted_joint(c: &bridgelab::CouplingSamples) -> bridgelab::BlockGaussian {
    let stacked: Vec<f64> = c.x0.iter().zip(&c.x_end).flat_map(|(a, b)| [*a, *b]).collect();
    let m = bridgelab::metrics::moment_summary(&stacked, 2).unwrap();
    bridgelab::BlockGaussian { mean: m.mean, cov: m.cov, block_dim: 1 }
}

#[test]
fn dipf_tracks_closed_form_ipf() {
    use bridgelab::gaussian::{ipf_initial, ipf_step_gaussian, Side};
    use bridgelab::procedures::run_dipf;
    let gamma = GaussianDist::scalar(-1.0, 1.0).unwrap();
    let upsilon = GaussianDist::scalar(1.0, 1.0).unwrap();
    let mut cfg = gaussian_config(12);
    cfg.iterations = 2;
    cfg.m_steps = 200;
    cfg.path_cache = 2000;
    let run = run_dipf(&cfg, &gamma, &upsilon, &|_| Ok(TimeLinear::zeros(1, 6, 1.0))).unwrap();
    assert!(run.aborted.is_none());
    let mut joint = ipf_initial(&gamma, 1.0);
    for (i, c) in run.couplings.iter().enumerate() {
        joint = if i % 2 == 0 {
            ipf_step_gaussian(&joint, &upsilon, Side::Second).unwrap()
        } else {
            ipf_step_gaussian(&joint, &gamma, Side::First).unwrap()
        };
        let exact = joint.cov[(0, 1)] / (joint.cov[(0, 0)] * joint.cov[(1, 1)]).sqrt();
        let rho = correlation(&c.x0, &c.x_end).unwrap();
        let fitted = fitted_joint(c);
        assert!((rho - exact).abs() < 0.02);
        assert!((fitted.cov[(0, 0)] - joint.cov[(0, 0)]).abs() < 0.03);
        assert!((fitted.cov[(1, 1)] - joint.cov[(1, 1)]).abs() < 0.03);
    }
}

#[test]
fn small_noise_dipf_is_worse_than_idbm() {
    use bridgelab::gaussian::{eot_gaussian, gaussian_kl};
    use bridgelab::procedures::run_dipf;
    let sigma = 0.05;
    let gamma = GaussianDist::scalar(-1.0, 1.0).unwrap();
    let upsilon = GaussianDist::scalar(1.0, 1.0).unwrap();
    let mut cfg = gaussian_config(13);
    cfg.sde = LinearRefSde::brownian(sigma, 1, 1.0).unwrap();
    cfg.iterations = 1;
    cfg.m_steps = 200;
    cfg.path_cache = 2000;
    cfg.convention = TargetConvention::RectifiedFlow;
    let target = eot_gaussian(&gamma, &upsilon, sigma).unwrap().joint();
    let idbm = run_idbm(&cfg, &gamma, &upsilon, None, &|_, _| Ok(TimeLinear::zeros(1, 6, 1.0))).unwrap();
    let dipf = run_dipf(&cfg, &gamma, &upsilon, &|_| Ok(TimeLinear::zeros(1, 6, 1.0))).unwrap();
    let kl_idbm = gaussian_kl(&fitted_joint(&idbm.couplings[1]), &target).unwrap();
    let kl_dipf = gaussian_kl(&fitted_joint(&dipf.couplings[0]), &target).unwrap();
    assert!(kl_dipf > kl_idbm);
}

#[test]
fn sgm_learns_gaussian_score_and_moments() {
    use bridgelab::mlp::DriftModel;
    use bridgelab::procedures::{run_sgm, sgm_generate};
    let s2 = 0.5f64;
    let sigma = 1.0;
    let gamma = GaussianDist::scalar(0.0, s2).unwrap();
    let mut cfg = gaussian_config(21);
    cfg.m_steps = 500;
    let run = run_sgm(&cfg, &gamma, TimeLinear::zeros(1, 6, 1.0)).unwrap();
    let mut worst: f64 = 0.0;
    for &t in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        let sd = (s2 + sigma * sigma * t).sqrt();
        for k in -20..=20 {
            let x = 2.0 * sd * k as f64 / 20.0;
            let s = run.model.forward(&[x], &[t]).unwrap()[0];
            worst = worst.max((s + x / (sd * sd)).abs());
        }
    }
    // start from the exact terminal law of the reference run from gamma
    let r_tau = GaussianDist::scalar(0.0, s2 + sigma * sigma).unwrap();
    let generated = sgm_generate(&run.model, &cfg, &r_tau, 100_000, 5).unwrap();
    let m = bridgelab::metrics::moment_summary(&generated, 1).unwrap();
    assert!(worst < 0.05);
    assert!(m.mean[0].abs() < 4.0 * m.std_err[0]);
    assert!((m.cov[(0, 0)] - s2).abs() < 0.02);
}

#[test]
fn ve_schedule_sgm_and_bdbm_agree() {
    use bridgelab::procedures::{run_sgm, sgm_prior};
    use bridgelab::BetaSchedule;
    let gamma = GaussianDist::scalar(0.5, 0.09).unwrap();
    let sde =
        LinearRefSde::new(0.0, nalgebra::DMatrix::identity(1, 1), BetaSchedule::ve(0.1, 3.0).unwrap(), 1.0).unwrap();
    let mut cfg = gaussian_config(22);
    cfg.sde = sde.clone();
    cfg.m_steps = 1000;
    cfg.n_samples = 20_000;
    cfg.train.sgd_steps = 6000;
    cfg.iterations = 1;
    cfg.policy = DirectionPolicy::BackwardOnly;
    let sgm = run_sgm(&cfg, &gamma, TimeLinear::zeros(1, 10, 1.0)).unwrap();
    let prior = sgm_prior(&sde).unwrap();
    let bdbm = run_idbm(&cfg, &gamma, &prior, None, &|_, _| Ok(TimeLinear::zeros(1, 10, 1.0))).unwrap();
    let a = bridgelab::metrics::moment_summary(&sgm.generated, 1).unwrap();
    let b = bridgelab::metrics::moment_summary(&bdbm.couplings[1].x0, 1).unwrap();
    let se = (a.std_err[0].powi(2) + b.std_err[0].powi(2)).sqrt();
    assert!((a.mean[0] - b.mean[0]).abs() < 4.0 * se);
    assert!((a.cov[(0, 0)] - b.cov[(0, 0)]).abs() < 0.01);
}

#[test]
fn optimal_start_coupling_is_preserved() {
    use bridgelab::gaussian::eot_gaussian;
    use bridgelab::rng::seeded;
    let gamma = GaussianDist::scalar(-1.0, 1.0).unwrap();
    let upsilon = GaussianDist::scalar(1.0, 1.0).unwrap();
    let opt = eot_gaussian(&gamma, &upsilon, 1.0).unwrap();
    let joint = GaussianDist::new(opt.joint().mean, opt.joint().cov).unwrap();
    let xs = joint.sample(100_000, &mut seeded(3));
    let x0: Vec<f64> = xs.iter().step_by(2).copied().collect();
    let x1: Vec<f64> = xs.iter().skip(1).step_by(2).copied().collect();
    let start = bridgelab::CouplingSamples::new(x0, x1, 1).unwrap();
    let mut cfg = gaussian_config(14);
    cfg.iterations = 2;
    cfg.m_steps = 200;
    let run = run_idbm(&cfg, &gamma, &upsilon, Some(start), &|_, _| Ok(TimeLinear::zeros(1, 6, 1.0))).unwrap();
    for c in &run.couplings[1..] {
        let rho = correlation(&c.x0, &c.x_end).unwrap();
        assert!((rho - opt.correlation_1d()).abs() < 0.02, "{rho}");
    }
}

#[test]
fn point_mass_start_reaches_target() {
    use bridgelab::metrics::{tv_histogram, Kde1d, Source};
    use bridgelab::samplers::PointMass;
    let upsilon = GaussianDist::scalar(0.0, 1.0).unwrap();
    let mut cfg = gaussian_config(15);
    cfg.iterations = 1;
    cfg.m_steps = 500;
    let run = run_idbm(&cfg, &PointMass(vec![0.0]), &upsilon, None, &|_, _| Ok(TimeLinear::zeros(1, 6, 1.0))).unwrap();
    let kde = Kde1d::fit(&run.couplings[1].x_end, None).unwrap();
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let tv = tv_histogram(&Source::Kde(&kde), &Source::Density(&pdf), 200, (-5.0, 5.0)).unwrap();
    assert!(tv <= 0.03, "{tv}");
}

#[test]
fn linear_model_recovers_regression_coefficients() {
    use bridgelab::losses::LossBatch;
    use bridgelab::mlp::DriftModel;
    use bridgelab::procedures::fit_drift;
    use rand::Rng;
    // target = 2x − 1 + noise at every t; normal equations give (2, −1)
    let cfg = TrainConfig {
        sgd_steps: 4000,
        batch_size: 256,
        adam: AdamConfig { lr: 1e-2, ..Default::default() },
        ema_decay: 0.99,
    };
    let mut make = |_: usize, rng: &mut dyn rand::RngCore| {
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let target = x.iter().map(|v| 2.0 * v - 1.0 + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        Ok(LossBatch { x_t: x, t, target, weight: vec![1.0; 256], dim: 1 })
    };
    let fit = fit_drift(TimeLinear::zeros(1, 0, 1.0), &cfg, 9, &mut make).unwrap();
    let p = fit.snapshot.params();
    assert!((p[0] - 2.0).abs() < 1e-2 && (p[1] + 1.0).abs() < 1e-2, "{p:?}");
}
