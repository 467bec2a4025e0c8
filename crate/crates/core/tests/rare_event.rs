//! Importance splitting against gambler's-ruin probabilities.

use proptest::prelude::*;
use smc_core::rare_event::{
    gamblers_ruin_probability, splitting_replicated, splitting_run, LevelProcess, RandomWalkChain,
};
use smc_core::{stats, Seeder};

fn check_unbiased(chain: &RandomWalkChain, n: usize, reps: usize, seed: u64, exact: f64) {
    let est = splitting_replicated(chain, n, reps, Seeder::new(seed)).unwrap();
    let se = est.standard_error.unwrap();
    assert!((est.mean - exact).abs() < 3.0 * se, "{:?}: {} vs {exact} (se {se})", chain.levels, est.mean);
}

#[test]
fn symmetric_ruin() {
    let exact = gamblers_ruin_probability(5, 0, 10, 0.5);
    assert_eq!(exact, 0.5);
    for levels in [vec![6, 7, 8, 9, 10], vec![8, 10], vec![10]] {
        check_unbiased(&RandomWalkChain::new(5, 0, 0.5, levels).unwrap(), 100, 200, 1, exact);
    }
}

#[test]
fn biased_ruin() {
    let exact = gamblers_ruin_probability(3, 0, 8, 0.4);
    for levels in [vec![4, 5, 6, 7, 8], vec![5, 8], vec![8]] {
        check_unbiased(&RandomWalkChain::new(3, 0, 0.4, levels).unwrap(), 100, 300, 2, exact);
    }
}

#[test]
fn redundant_level_on_random_walk() {
    let plain = RandomWalkChain::new(3, 0, 0.4, vec![5, 8]).unwrap();
    let padded = RandomWalkChain::new(3, 0, 0.4, vec![5, 5, 8]).unwrap();
    let a = splitting_replicated(&plain, 100, 300, Seeder::new(3)).unwrap();
    let b = splitting_replicated(&padded, 100, 300, Seeder::new(4)).unwrap();
    let z = (a.mean - b.mean) / (a.standard_error.unwrap().powi(2) + b.standard_error.unwrap().powi(2)).sqrt();
    assert!(z.abs() < 4.0, "z = {z}");
    assert!(b.runs.iter().all(|r| r.fractions.len() < 2 || r.fractions[1] == 1.0));
}

#[test]
fn redundant_level_on_deterministic_chain() {
    let plain = RandomWalkChain::new(2, 0, 1.0, vec![4, 6]).unwrap();
    let padded = RandomWalkChain::new(2, 0, 1.0, vec![4, 5, 5, 6]).unwrap();
    let a = splitting_run(&plain, 30, Seeder::new(0)).unwrap();
    let b = splitting_run(&padded, 30, Seeder::new(0)).unwrap();
    assert_eq!(a.estimate, 1.0);
    assert_eq!(b.estimate, 1.0);
    assert_eq!(a.total_steps, b.total_steps);
}

/// Independent walks until `budget` chain steps are spent; returns the hit fraction.
fn crude_estimate(chain: &RandomWalkChain, budget: u64, seeder: Seeder) -> f64 {
    let last = chain.num_levels() - 1;
    let (mut spent, mut runs, mut hits) = (0u64, 0u64, 0u64);
    while spent < budget {
        let mut rng = seeder.child(runs).rng();
        let mut z = chain.start();
        loop {
            if chain.killed(&z) {
                break;
            }
            if chain.reached(last, &z) {
                hits += 1;
                break;
            }
            z = chain.step(&z, &mut rng);
            spent += 1;
        }
        runs += 1;
    }
    hits as f64 / runs as f64
}

#[test]
fn splitting_beats_crude_monte_carlo_at_equal_budget() {
    // Up-probability 1/3 from 1: P(hit k before 0) = 1 / (2^k - 1).
    let k = 8;
    let chain = RandomWalkChain::new(1, 0, 1.0 / 3.0, (2..=k).collect()).unwrap();
    let exact = gamblers_ruin_probability(1, 0, k, 1.0 / 3.0);
    assert!((exact - 1.0 / 255.0).abs() < 1e-15);
    let split = splitting_replicated(&chain, 100, 200, Seeder::new(10)).unwrap();
    let crude: Vec<f64> = split
        .runs
        .iter()
        .enumerate()
        .map(|(r, run)| crude_estimate(&chain, run.total_steps, Seeder::new(20).child(r as u64)))
        .collect();
    let split_est = split.estimates();
    let (vs, vc) = (stats::variance(&split_est), stats::variance(&crude));
    let reps = split_est.len() as f64;
    let slack = 2.0 * (2.0 / (reps - 1.0)).sqrt() * (vs * vs + vc * vc).sqrt();
    assert!(vs < vc + slack, "splitting {vs:e} vs crude {vc:e}");
    assert!((split.mean - exact).abs() < 3.0 * split.standard_error.unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimate_is_product_of_fractions(seed in 0u64..10_000, n in 1usize..60, p in 0.0f64..=1.0, start in 1i64..6) {
        let chain = RandomWalkChain::new(start, 0, p, vec![start + 1, start + 2, start + 4]).unwrap();
        let run = splitting_run(&chain, n, Seeder::new(seed)).unwrap();
        prop_assert!(run.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
        let product: f64 = run.fractions.iter().product();
        prop_assert_eq!(run.estimate, product);
        if run.extinct_at.is_some() {
            prop_assert_eq!(run.estimate, 0.0);
        } else {
            prop_assert_eq!(run.fractions.len(), 3);
        }
    }
}
