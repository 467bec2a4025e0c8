//! SMC sampler evidence and moment checks on closed-form targets.

use nalgebra::{DMatrix, DVector};
use smc_core::filter::{ParticleEnsemble, ResampleConfig};
use smc_core::model::LinearGaussianSsm;
use smc_core::oracle::kalman_filter;
use smc_core::resample::WeightVector;
use smc_core::smc_sampler::{
    move_ensemble, run_smc_sampler, uniform_schedule, weighted_moments, AdaptiveRandomWalk, DiagGaussianMixture,
    PosteriorAnnealing, RandomWalkMetropolis, SampleableDensity, SmcSamplerConfig, Tempered,
};
use smc_core::{stats, Seeder};

fn std_normal() -> DiagGaussianMixture {
    DiagGaussianMixture::gaussian(vec![0.0], vec![1.0]).unwrap()
}

/// `exp(-x^2 / (2 sigma^2))`, whose integral is `sigma sqrt(2 pi)`.
fn unnormalized_gaussian(sigma: f64) -> DiagGaussianMixture {
    let log_z = (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    DiagGaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![sigma]], log_z).unwrap()
}

fn config(n: usize, moves: usize) -> SmcSamplerConfig {
    SmcSamplerConfig { n_particles: n, moves_per_step: moves, resample: ResampleConfig::default() }
}

fn log_evidences(sigma: f64, steps: usize, n: usize, reps: u64) -> Vec<f64> {
    let seq = Tempered::new(std_normal(), unnormalized_gaussian(sigma), uniform_schedule(steps)).unwrap();
    (0..reps)
        .map(|r| {
            let mut k = AdaptiveRandomWalk::default();
            run_smc_sampler(&seq, &mut k, &config(n, 2), Seeder::new(r)).unwrap().log_evidence
        })
        .collect()
}

#[test]
fn gaussian_evidence_is_unbiased() {
    let sigma: f64 = 0.5;
    let z = sigma * (2.0 * std::f64::consts::PI).sqrt();
    let ratios: Vec<f64> = log_evidences(sigma, 10, 500, 60).iter().map(|l| l.exp() / z).collect();
    let (m, se) = (stats::mean(&ratios), stats::standard_error(&ratios));
    assert!((m - 1.0).abs() < 3.0 * se, "{m} +- {se}");
}

#[test]
fn mixture_evidence_is_unbiased() {
    let target = DiagGaussianMixture::new(
        vec![0.3, 0.7],
        vec![vec![-2.0], vec![1.5]],
        vec![vec![0.5], vec![0.8]],
        (3.0f64).ln(),
    )
    .unwrap();
    let seq = Tempered::new(std_normal(), target, uniform_schedule(20)).unwrap();
    let ratios: Vec<f64> = (0..40)
        .map(|r| {
            let mut k = AdaptiveRandomWalk::default();
            run_smc_sampler(&seq, &mut k, &config(500, 3), Seeder::new(100 + r)).unwrap().log_evidence.exp() / 3.0
        })
        .collect();
    let (m, se) = (stats::mean(&ratios), stats::standard_error(&ratios));
    assert!((m - 1.0).abs() < 3.0 * se, "{m} +- {se}");
}

#[test]
fn random_walk_leaves_standard_normal_invariant() {
    let n = 100_000;
    let seq = Tempered::new(std_normal(), std_normal(), uniform_schedule(1)).unwrap();
    let init = Seeder::new(5);
    let states: Vec<Vec<f64>> = (0..n).map(|i| std_normal().sample(&mut init.child(i).rng())).collect();
    let mut ens = ParticleEnsemble::uniform(states).unwrap();
    let before = ens.weights.clone();
    let kernel = RandomWalkMetropolis::new(DMatrix::from_element(1, 1, 2.0)).unwrap();
    move_ensemble(&mut ens, &seq, 1, &kernel, 1, Seeder::new(6));
    assert_eq!(ens.weights, before);
    let xs: Vec<f64> = ens.states.iter().map(|x| x[0]).collect();
    let m = stats::mean(&xs);
    let v = stats::variance(&xs);
    let nf = n as f64;
    assert!(m.abs() < 4.0 / nf.sqrt(), "mean {m}");
    assert!((v - 1.0).abs() < 4.0 * (2.0 / nf).sqrt(), "variance {v}");
}

#[test]
fn more_steps_do_not_increase_variance() {
    let vars: Vec<(f64, f64)> = [5, 20, 80]
        .iter()
        .map(|&s| {
            let l = log_evidences(0.3, s, 200, 40);
            let v = stats::variance(&l);
            (v, v * (2.0 / (l.len() as f64 - 1.0)).sqrt())
        })
        .collect();
    for w in vars.windows(2) {
        let ((v_few, se_few), (v_many, se_many)) = (w[0], w[1]);
        assert!(v_many <= v_few + 2.0 * (se_few.powi(2) + se_many.powi(2)).sqrt(), "{vars:?}");
    }
}

#[test]
fn posterior_annealing_matches_conjugate_posterior() {
    // Static scalar parameter observed with unit noise: the Kalman filter
    // with F = 1, V = 0 gives the exact posterior.
    let prior_sd = 2.0;
    let ys: Vec<Vec<f64>> = [1.2, 0.4, 2.1, 1.7, 0.9, 1.4].iter().map(|v| vec![*v]).collect();
    let static_model = LinearGaussianSsm::scalar(1.0, 0.0, 1.0, 1.0, 0.0, prior_sd * prior_sd).unwrap();
    let exact = kalman_filter(&static_model, &ys).unwrap();
    let post = exact.filtered.last().unwrap();
    let prior = DiagGaussianMixture::gaussian(vec![0.0], vec![prior_sd]).unwrap();
    let seq = PosteriorAnnealing::new(prior, DMatrix::identity(1, 1), DMatrix::identity(1, 1), ys.clone()).unwrap();

    let (means, vars): (Vec<f64>, Vec<f64>) = (0..30)
        .map(|r| {
            let mut k = AdaptiveRandomWalk::default();
            let out = run_smc_sampler(&seq, &mut k, &config(1000, 2), Seeder::new(r)).unwrap();
            let (m, c) = weighted_moments(&out.ensemble.states, &out.ensemble.weights);
            (m[0], c[(0, 0)])
        })
        .unzip();
    let (mm, sm) = (stats::mean(&means), stats::standard_error(&means));
    let (mv, sv) = (stats::mean(&vars), stats::standard_error(&vars));
    assert!((mm - post.mean[0]).abs() < 3.0 * sm, "mean {mm} vs {} (se {sm})", post.mean[0]);
    assert!((mv - post.cov[(0, 0)]).abs() < 3.0 * sv, "var {mv} vs {} (se {sv})", post.cov[(0, 0)]);
}

#[test]
fn weighted_moments_match_direct_formula() {
    let states = vec![vec![1.0, 0.0], vec![3.0, 2.0]];
    let w = WeightVector::from_probabilities(&[0.25, 0.75]).unwrap();
    let (m, c) = weighted_moments(&states, &w);
    assert!((m - DVector::from_vec(vec![2.5, 1.5])).norm() < 1e-15);
    assert!((c[(0, 0)] - 0.75).abs() < 1e-15 && (c[(0, 1)] - 0.75).abs() < 1e-15 && (c[(1, 1)] - 0.75).abs() < 1e-15);
}
