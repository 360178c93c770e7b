use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

use stfuse::blockagg::{compute_overlaps, GridSpec};
use stfuse::rng::substream;
use stfuse::stage1::{fit_model, FixedEffectPriors, FixedPrecisions, Stage1Config, Stage1Fixed, Stage1Hyper, Stage1Model, Stage1Priors};
use stfuse::stage2::*;
use stfuse::{BlockGeometry, Error, Point2D};

mod common;

/// Poisson counts from the generating model with iid block and RW1 time effects.
fn simulate_health(
    n: usize,
    nt: usize,
    gamma: (f64, f64),
    hyper: &Stage2Hyper,
    expected: f64,
    seed: u64,
) -> HealthData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, nt, |_, _| rng.sample::<f64, _>(StandardNormal));
    let phi: Vec<f64> = (0..n).map(|_| hyper.sigma2_phi.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut nu = vec![0.0; nt];
    for t in 1..nt {
        nu[t] = nu[t - 1] + hyper.sigma2_nu.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    let p = DMatrix::from_element(n, nt, expected);
    let y = DMatrix::from_fn(n, nt, |i, t| {
        let rate = expected * (gamma.0 + gamma.1 * x[(i, t)] + phi[i] + nu[t]).exp();
        rng.sample(Poisson::new(rate).unwrap())
    });
    HealthData::new(y, p, x).unwrap()
}

fn truth() -> Stage2Hyper {
    Stage2Hyper {
        sigma2_phi: 0.05,
        sigma2_nu: 0.02,
    }
}

#[test]
fn single_cell_mode_matches_grid_maximization() {
    let (y, p, x) = (7.0, 3.2, 0.8);
    let data = HealthData::new(
        DMatrix::from_element(1, 1, y),
        DMatrix::from_element(1, 1, p),
        DMatrix::from_element(1, 1, x),
    )
    .unwrap();
    let mut priors = Stage2Priors::non_informative();
    priors.gamma0_var = Some(10.0);
    let config = Stage2Config::new(priors);
    // A negligible block-effect variance removes the random effect.
    let hyper = Stage2Hyper {
        sigma2_phi: 1e-14,
        sigma2_nu: 1.0,
    };
    let c = laplace(&data, &hyper, &config).unwrap();

    let log_post = |g0: f64, g1: f64| {
        let eta = p.ln() + g0 + g1 * x;
        y * eta - eta.exp() - g0 * g0 / 20.0 - g1 * g1 / 2000.0
    };
    let (mut centre, mut half) = ((0.0, 0.0), 4.0);
    for _ in 0..12 {
        let mut best = (f64::NEG_INFINITY, centre);
        for a in 0..=40 {
            for b in 0..=40 {
                let g = (centre.0 + half * (a as f64 / 20.0 - 1.0), centre.1 + half * (b as f64 / 20.0 - 1.0));
                let v = log_post(g.0, g.1);
                if v > best.0 {
                    best = (v, g);
                }
            }
        }
        centre = best.1;
        half /= 5.0;
    }
    assert!((c.gamma0() - centre.0).abs() < 1e-4, "{} vs {}", c.gamma0(), centre.0);
    assert!((c.gamma1() - centre.1).abs() < 1e-4, "{} vs {}", c.gamma1(), centre.1);
}

#[test]
fn gaussian_likelihood_reproduces_conjugate_posterior() {
    let hyper = Stage2Hyper {
        sigma2_phi: 0.3,
        sigma2_nu: 0.15,
    };
    let (n, nt, noise) = (4, 3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let counts = DMatrix::from_fn(n, nt, |_, _| 2.0 + rng.sample::<f64, _>(StandardNormal));
    let expected = DMatrix::from_fn(n, nt, |_, _| rng.random_range(0.5..2.0));
    let exposure = DMatrix::from_fn(n, nt, |_, _| rng.sample::<f64, _>(StandardNormal));
    let data = HealthData::new(counts, expected, exposure).unwrap();
    let mut priors = Stage2Priors::non_informative();
    priors.gamma0_var = Some(100.0);
    let mut config = Stage2Config::new(priors);
    config.likelihood = Likelihood::Gaussian { noise_variance: noise };
    let c = laplace(&data, &hyper, &config).unwrap();
    let oracle = common::conjugate_oracle(&data, &hyper, 100.0, 1000.0, noise);

    let mut got = vec![c.gamma0(), c.gamma1()];
    got.extend(c.phi());
    got.extend(c.nu());
    for (k, g) in got.iter().enumerate() {
        assert!((g - oracle.mean[k]).abs() < 1e-8, "mean {k}: {g} vs {}", oracle.mean[k]);
    }
    let cov = c.covariance();
    for a in 0..2 + n {
        for b in 0..2 + n {
            assert!((cov[(a, b)] - oracle.cov[(a, b)]).abs() < 1e-8, "cov ({a},{b})");
        }
    }
    assert!(
        (c.log_marginal - oracle.log_marginal).abs() < 1e-8 * oracle.log_marginal.abs().max(1.0),
        "{} vs {}",
        c.log_marginal,
        oracle.log_marginal
    );
}

#[test]
fn scaling_expected_counts_shifts_only_the_intercept() {
    let data = simulate_health(30, 4, (0.1, 0.18), &truth(), 40.0, 5);
    let c = 3.7;
    let scaled = HealthData::new(data.counts.clone(), &data.expected * c, data.exposure.clone()).unwrap();
    let config = Stage2Config::new(Stage2Priors::non_informative());
    let a = laplace(&data, &truth(), &config).unwrap();
    let b = laplace(&scaled, &truth(), &config).unwrap();
    assert!((b.gamma0() - (a.gamma0() - c.ln())).abs() < 1e-6);
    assert!((b.gamma1() - a.gamma1()).abs() < 1e-6);

    let fa = fit_glmm(&data, &config).unwrap();
    let fb = fit_glmm(&scaled, &config).unwrap();
    assert!((fb.mode().gamma0() - (fa.mode().gamma0() - c.ln())).abs() < 1e-6);
    assert!((fb.mode().gamma1() - fa.mode().gamma1()).abs() < 1e-6);
}

#[test]
fn time_effects_sum_to_zero_and_mode_is_stationary() {
    let data = simulate_health(25, 6, (-0.2, 0.18), &truth(), 30.0, 8);
    let fit = fit_glmm(&data, &Stage2Config::new(Stage2Priors::non_informative())).unwrap();
    let nu = fit.mode().nu();
    assert_eq!(nu.len(), 6);
    assert!(nu.iter().sum::<f64>().abs() < 1e-8);
    assert!(fit.mode().gradient_norm <= 1e-6, "{}", fit.mode().gradient_norm);
    let basis = sum_to_zero_basis(6);
    let gram = basis.transpose() * &basis;
    assert!((gram - DMatrix::<f64>::identity(5, 5)).amax() < 1e-14);
    assert!(basis.row_sum().amax() < 1e-14);
}

#[test]
fn null_exposure_effect_is_not_detected() {
    let data = simulate_health(60, 5, (0.0, 0.0), &truth(), 25.0, 13);
    let fit = fit_glmm(&data, &Stage2Config::new(Stage2Priors::non_informative())).unwrap();
    let (m, v) = fit.fixed_moments();
    assert!(m[1].abs() < 3.0 * v[1].sqrt(), "{} (sd {})", m[1], v[1].sqrt());
}

#[test]
fn recovers_generating_effect() {
    let data = simulate_health(98, 6, (0.2, 0.182), &truth(), 50.0, 17);
    let priors = Stage2Priors::informative(&truth());
    let fit = fit_glmm(&data, &Stage2Config::new(priors)).unwrap();
    let (m, v) = fit.fixed_moments();
    assert!((m[1] - 0.182).abs() < 3.0 * v[1].sqrt(), "{} (sd {})", m[1], v[1].sqrt());
    let rows = fit.summary();
    assert_eq!(rows.iter().map(|r| r.parameter.as_str()).collect::<Vec<_>>(), Stage2Samples::PARAMETERS);
    assert!(rows.iter().all(|r| r.lower <= r.estimate && r.estimate <= r.upper));
}

#[test]
fn zero_count_period_is_degenerate() {
    let mut data = simulate_health(5, 3, (0.0, 0.1), &truth(), 10.0, 2);
    data.counts.column_mut(1).fill(0.0);
    let err = fit_glmm(&data, &Stage2Config::new(Stage2Priors::non_informative())).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
}

#[test]
fn draws_match_laplace_variance_and_are_reproducible() {
    let data = simulate_health(40, 4, (0.1, 0.18), &truth(), 40.0, 21);
    let fit = fit_glmm(&data, &Stage2Config::new(Stage2Priors::non_informative())).unwrap();
    let a = sample_stage2(&fit, 200, &mut ChaCha8Rng::seed_from_u64(4));
    let b = sample_stage2(&fit, 200, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a, b);
    assert_eq!(a.len(), 200);
    for k in 0..4 {
        assert_eq!(a.parameter(k).len(), 200);
    }
    let laplace_var = fit.mode().covariance()[(1, 1)];
    let draw_var = stfuse::stats::variance(&a.gamma1);
    assert!((draw_var / laplace_var - 1.0).abs() < 0.15, "{draw_var} vs {laplace_var}");
}

#[test]
fn single_exposure_pooling_equals_single_fit_sampling() {
    let data = simulate_health(20, 3, (0.1, 0.18), &truth(), 40.0, 30);
    let config = Stage2Config::new(Stage2Priors::non_informative());
    let pooled = propagate_exposures(std::slice::from_ref(&data.exposure), &data, &config, 50, 99).unwrap();
    let fit = fit_glmm(&data, &config).unwrap();
    let direct = sample_stage2(&fit, 50, &mut substream(99, 0));
    assert_eq!(pooled.samples, direct);
    assert_eq!(pooled.n_failures, 0);
}

fn population_variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

#[test]
fn identical_exposures_add_no_between_sample_spread() {
    let data = simulate_health(20, 3, (0.1, 0.18), &truth(), 40.0, 31);
    let config = Stage2Config::new(Stage2Priors::non_informative());
    let exposures = vec![data.exposure.clone(); 3];
    let pooled = propagate_exposures(&exposures, &data, &config, 2000, 5).unwrap();
    assert_eq!(pooled.samples.len(), 6000);
    let within = fit_glmm(&data, &config).unwrap().mode().covariance()[(1, 1)];
    let total = population_variance(&pooled.samples.gamma1);
    assert!((total / within - 1.0).abs() < 0.06, "{total} vs {within}");
}

#[test]
fn propagated_variance_dominates_within_fit_variance() {
    let s1_truth = Stage1Hyper {
        alpha1: 1.2,
        sigma2_e: 0.1,
        sigma2_delta: 0.2,
        varsigma: 0.5,
        sigma2_omega: 1.0,
        rho: 1.2,
    };
    let fixed = Stage1Fixed {
        alpha0: 0.3,
        beta0: 1.0,
        beta1: 0.5,
    };
    let sim = common::simulate_instance(40, 12, 6, 2, 3.0, 0.5, &s1_truth, &fixed);
    let model = Stage1Model::new(&sim.obs, &sim.mesh, FixedPrecisions::default(), FixedEffectPriors::default()).unwrap();
    let mut cfg = Stage1Config::new(Stage1Priors::flat());
    cfg.initial = Some(s1_truth);
    let stage1 = fit_model(&model, &cfg).unwrap();

    let grid = GridSpec::new(Point2D::new(0.0, 0.0), 0.5, 0.5, 6, 6).unwrap();
    let blocks: Vec<BlockGeometry> = (0..9)
        .map(|b| {
            let (bx, by) = ((b % 3) as f64, (b / 3) as f64);
            BlockGeometry::rectangle(format!("b{b}"), bx, by, bx + 1.0, by + 1.0).unwrap()
        })
        .collect();
    let table = compute_overlaps(&blocks, &grid).unwrap();
    let projector = stfuse::mesh::build_projector(&sim.mesh, &grid.centroids()).unwrap();
    let z_grid = sim.obs.z.rows(sim.obs.n_monitors(), 36).into_owned();
    let true_blocks = table
        .apply_columns(&sim.x.rows(sim.obs.n_monitors(), 36).into_owned())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let counts = DMatrix::from_fn(9, 2, |i, t| {
        let rate = 60.0 * (-0.5 + 0.4 * true_blocks[(i, t)]).exp();
        rng.sample(Poisson::new(rate).unwrap())
    });
    let health = HealthData::new(counts, DMatrix::from_element(9, 2, 60.0), true_blocks).unwrap();
    let config = Stage2Config::new(Stage2Priors::non_informative());
    let pooled = propagate(&stage1, &projector, &z_grid, &table, &health, &config, 6, 200, 11).unwrap();
    assert_eq!(pooled.samples.len(), 6 * 200);
    assert_eq!(pooled.per_fit.len(), 6);

    let total = population_variance(&pooled.samples.gamma1);
    let within = pooled.per_fit.iter().map(|s| population_variance(&s.gamma1)).sum::<f64>() / 6.0;
    let means: Vec<f64> = pooled.per_fit.iter().map(|s| s.gamma1.iter().sum::<f64>() / 200.0).collect();
    assert!(total >= within, "{total} < {within}");
    assert!((total - within - population_variance(&means)).abs() < 1e-12 * total.max(1.0));
    assert!(population_variance(&means) > 0.0);

    let mut csv = Vec::new();
    pooled.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some("parameter,mean,median,q025,q975,n_samples,n_failures"));
    assert!(text.lines().nth(2).unwrap().starts_with("gamma1,"));
    assert!(text.lines().nth(2).unwrap().ends_with(",1200,0"));
}
