//! Monte Carlo checks of the particle filters against exact solutions.

use proptest::prelude::*;
use smc_core::filter::{
    apf_step, run_apf, run_filter, sir_step, AuxiliarySpec, FilterConfig, FiniteHmmOptimal,
    LinearGaussianOptimal, ParticleEnsemble, ResampleConfig,
};
use smc_core::model::{simulate, Emission, FiniteHmm, LinearGaussianSsm, StateSpaceModel};
use smc_core::oracle::{hmm_forward, kalman_filter};
use smc_core::resample::{ResamplingScheme, WeightVector};
use smc_core::rng::StreamRng;
use smc_core::{stats, Seeder};

fn scalar_model() -> LinearGaussianSsm {
    LinearGaussianSsm::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap()
}

fn three_state() -> FiniteHmm {
    FiniteHmm::new(
        vec![0.5, 0.3, 0.2],
        vec![vec![0.8, 0.15, 0.05], vec![0.1, 0.8, 0.1], vec![0.05, 0.15, 0.8]],
        Emission::Gaussian { means: vec![-2.0, 0.0, 2.0], sds: vec![1.0, 1.0, 1.0] },
    )
    .unwrap()
}

/// Mean of `exp(log Z_hat - log Z)` over replications and its standard error.
fn likelihood_ratios<M: StateSpaceModel>(model: &M, ys: &[Vec<f64>], exact: f64, n: usize, reps: u64) -> (f64, f64) {
    let cfg = FilterConfig::new(n).with_resample(ResampleConfig::always_multinomial());
    let ratios: Vec<f64> = (0..reps)
        .map(|r| (run_filter(model, ys, &cfg, Seeder::new(1000 + r)).unwrap().log_likelihood() - exact).exp())
        .collect();
    (stats::mean(&ratios), stats::standard_error(&ratios))
}

#[test]
fn likelihood_estimate_is_unbiased_linear_gaussian() {
    let m = scalar_model();
    let (_, ys) = simulate(&m, 10, Seeder::new(3));
    let exact = kalman_filter(&m, &ys).unwrap().log_likelihood();
    let (mean, se) = likelihood_ratios(&m, &ys, exact, 50, 400);
    assert!((mean - 1.0).abs() < 3.0 * se, "mean ratio {mean} se {se}");
}

#[test]
fn likelihood_estimate_is_unbiased_hmm() {
    let hmm = three_state();
    let (_, ys) = simulate(&hmm, 15, Seeder::new(4));
    let exact = hmm_forward(&hmm, &ys).unwrap().log_likelihood;
    let (mean, se) = likelihood_ratios(&hmm, &ys, exact, 30, 400);
    assert!((mean - 1.0).abs() < 3.0 * se, "mean ratio {mean} se {se}");
}

#[test]
fn gated_resampling_keeps_likelihood_unbiased() {
    let m = scalar_model();
    let (_, ys) = simulate(&m, 10, Seeder::new(3));
    let exact = kalman_filter(&m, &ys).unwrap().log_likelihood();
    let cfg = FilterConfig::new(50);
    let ratios: Vec<f64> = (0..400)
        .map(|r| (run_filter(&m, &ys, &cfg, Seeder::new(r)).unwrap().log_likelihood() - exact).exp())
        .collect();
    let (mean, se) = (stats::mean(&ratios), stats::standard_error(&ratios));
    assert!((mean - 1.0).abs() < 3.0 * se, "mean ratio {mean} se {se}");
}

#[test]
fn hmm_filter_marginals_close_to_forward_pass() {
    let hmm = three_state();
    let (_, ys) = simulate(&hmm, 30, Seeder::new(8));
    let exact = hmm_forward(&hmm, &ys).unwrap();
    let trace = run_filter(&hmm, &ys, &FilterConfig::new(20_000), Seeder::new(9)).unwrap();
    for (n, s) in trace.steps.iter().enumerate() {
        let tv = exact.filtered[n + 1].total_variation(&s.mean);
        assert!(tv < 0.02, "step {} tv {tv}", n + 1);
    }
}

#[test]
fn filter_error_shrinks_with_particles() {
    let m = scalar_model();
    let (_, ys) = simulate(&m, 30, Seeder::new(11));
    let kf = kalman_filter(&m, &ys).unwrap();
    let err = |n: usize| -> f64 {
        let reps: Vec<f64> = (0..10)
            .map(|r| {
                let tr = run_filter(&m, &ys, &FilterConfig::new(n), Seeder::new(r)).unwrap();
                let zs: Vec<f64> = tr
                    .steps
                    .iter()
                    .zip(&kf.filtered[1..])
                    .map(|(s, b)| (s.mean[0] - b.mean[0]).abs() / b.cov[(0, 0)].sqrt())
                    .collect();
                stats::mean(&zs)
            })
            .collect();
        stats::mean(&reps)
    };
    let (small, large) = (err(100), err(2500));
    // Five-fold drop in sd expected; demand at least three-fold.
    assert!(large * 3.0 < small, "{small} vs {large}");
}

/// `r = 1`, `Q = P`.
struct Bootstrap;
impl AuxiliarySpec<LinearGaussianSsm> for Bootstrap {
    fn log_lookahead(&self, _x: &nalgebra::DVector<f64>, _y: &[f64]) -> f64 {
        0.0
    }
    fn sample_proposal(&self, x: &nalgebra::DVector<f64>, _y: &[f64], rng: &mut StreamRng) -> nalgebra::DVector<f64> {
        scalar_model().sample_transition(x, rng)
    }
    fn proposal_log_density(&self, x: &nalgebra::DVector<f64>, _y: &[f64], x_new: &nalgebra::DVector<f64>) -> f64 {
        scalar_model().transition_log_density(x, x_new).unwrap()
    }
}

#[test]
fn trivial_auxiliary_filter_is_the_bootstrap_filter() {
    let m = scalar_model();
    let (_, ys) = simulate(&m, 25, Seeder::new(12));
    for resample in [ResampleConfig::default(), ResampleConfig::always_multinomial()] {
        let cfg = FilterConfig::new(300).with_resample(resample).storing();
        let sir = run_filter(&m, &ys, &cfg, Seeder::new(5)).unwrap();
        let apf = run_apf(&m, &ys, &cfg, &Bootstrap, Seeder::new(5)).unwrap();
        assert_eq!(sir, apf);
    }
}

#[test]
fn ideal_auxiliary_filter_has_uniform_weights_on_hmm() {
    let hmm = FiniteHmm::new(
        vec![0.5, 0.5],
        vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        Emission::Gaussian { means: vec![0.0, 2.0], sds: vec![1.0, 1.0] },
    )
    .unwrap();
    let (_, ys) = simulate(&hmm, 12, Seeder::new(13));
    let aux = FiniteHmmOptimal::new(&hmm);
    let cfg = FilterConfig::new(500).with_resample(ResampleConfig::always(ResamplingScheme::Systematic)).storing();
    let trace = run_apf(&hmm, &ys, &cfg, &aux, Seeder::new(2)).unwrap();
    let last = trace.ensembles.as_ref().unwrap().last().unwrap();
    let first = last.weights.log_weights()[0];
    assert!(last.weights.log_weights().iter().all(|w| *w == first));
}

#[test]
fn ideal_auxiliary_filter_beats_bootstrap_variance() {
    let m = scalar_model();
    let (_, ys) = simulate(&m, 20, Seeder::new(14));
    let aux = LinearGaussianOptimal::new(&m).unwrap();
    let cfg = FilterConfig::new(100).with_resample(ResampleConfig::always_multinomial());
    let sir: Vec<f64> = (0..100).map(|r| run_filter(&m, &ys, &cfg, Seeder::new(r)).unwrap().log_likelihood()).collect();
    let apf: Vec<f64> = (0..100).map(|r| run_apf(&m, &ys, &cfg, &aux, Seeder::new(r)).unwrap().log_likelihood()).collect();
    assert!(stats::variance(&apf) < stats::variance(&sir));
}

#[test]
fn permuting_particles_leaves_step_summaries_in_distribution() {
    let m = scalar_model();
    let prior = ParticleEnsemble::from_prior(&m, 200, Seeder::new(20)).unwrap();
    let mut order: Vec<usize> = (0..200).collect();
    order.reverse();
    order.rotate_left(37);
    let permuted = ParticleEnsemble::new(
        order.iter().map(|&i| prior.states[i].clone()).collect(),
        WeightVector::from_log(order.iter().map(|&i| prior.weights.log_weights()[i]).collect()).unwrap(),
        0,
    )
    .unwrap();
    let y = [0.8];
    let cfg = ResampleConfig::always_multinomial();
    let run = |ens: &ParticleEnsemble<nalgebra::DVector<f64>>, offset: u64| -> (Vec<f64>, Vec<f64>) {
        (0..400u64)
            .map(|r| {
                let out = sir_step(ens, &y, &m, &cfg, Seeder::new(offset + r)).unwrap();
                (out.ensemble.weighted_mean(&m)[0], out.log_lik_increment)
            })
            .unzip()
    };
    let (ma, la) = run(&prior, 0);
    let (mb, lb) = run(&permuted, 10_000);
    for (a, b) in [(ma, mb), (la, lb)] {
        let z = (stats::mean(&a) - stats::mean(&b)) / (stats::variance(&a) / 400.0 + stats::variance(&b) / 400.0).sqrt();
        assert!(z.abs() < 4.0, "z = {z}");
    }
}

#[test]
fn auxiliary_step_rejects_deterministic_transitions() {
    let det = LinearGaussianSsm::scalar(0.9, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
    let ens = ParticleEnsemble::from_prior(&det, 10, Seeder::new(0)).unwrap();
    assert!(apf_step(&ens, &[0.0], &det, &Bootstrap, &ResampleConfig::default(), Seeder::new(0)).is_err());
}

/// Survives with probability `p` at each step, deterministically by state.
struct Indicator;
impl StateSpaceModel for Indicator {
    type State = f64;
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn sample_initial<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random()
    }
    fn sample_transition<R: rand::Rng + ?Sized>(&self, _x: &f64, rng: &mut R) -> f64 {
        rng.random()
    }
    fn obs_log_density(&self, x: &f64, y: &[f64]) -> f64 {
        if *x < y[0] { 0.0 } else { f64::NEG_INFINITY }
    }
    fn sample_observation<R: rand::Rng + ?Sized>(&self, _x: &f64, _rng: &mut R) -> Vec<f64> {
        vec![1.0]
    }
    fn write_features(&self, x: &f64, out: &mut [f64]) {
        out[0] = *x;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn indicator_increments_are_survivor_fractions(seed in 0u64..1_000, n in 1usize..200, p in 0.05f64..1.0) {
        let ys = vec![vec![p]; 4];
        let cfg = FilterConfig::new(n).with_resample(ResampleConfig::always(ResamplingScheme::Systematic)).storing();
        let trace = run_filter(&Indicator, &ys, &cfg, Seeder::new(seed));
        if let Ok(trace) = trace {
            for (s, e) in trace.steps.iter().zip(&trace.ensembles.as_ref().unwrap()[1..]) {
                let alive = e.weights.log_weights().iter().filter(|w| **w > f64::NEG_INFINITY).count();
                let expect = (alive as f64 / n as f64).ln();
                prop_assert!((s.log_lik_increment - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_weights_stay_normalized(seed in 0u64..1_000, n in 2usize..300, threshold in 0.05f64..1.0) {
        let m = scalar_model();
        let (_, ys) = simulate(&m, 6, Seeder::new(seed));
        let cfg = FilterConfig::new(n)
            .with_resample(ResampleConfig { scheme: ResamplingScheme::Systematic, ess_threshold: Some(threshold) })
            .storing();
        let trace = run_filter(&m, &ys, &cfg, Seeder::new(seed)).unwrap();
        for (s, e) in trace.steps.iter().zip(&trace.ensembles.as_ref().unwrap()[1..]) {
            let total: f64 = e.weights.probabilities().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
            prop_assert!(s.ess >= 1.0 - 1e-9 && s.ess <= n as f64 + 1e-9);
            prop_assert!(s.log_lik_increment.is_finite());
        }
    }
}
