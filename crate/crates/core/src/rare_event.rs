//! Fixed-effort importance splitting.
//!
//! Estimates `P(tau < zeta)` for a Markov chain, where `tau` is the hitting
//! time of the last of a sequence of nested levels and `zeta` a killing time.
//! Every particle runs from its current level to the next one or until it
//! is killed; the survivor fraction is recorded and the survivors are
//! duplicated back to `N` by systematic resampling over uniform weights.
//! The product of the fractions is unbiased.

use log::warn;
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::filter::par_map;
use crate::resample::{systematic_resample, WeightVector};
use crate::rng::{Seeder, StreamRng};
use crate::stats;

/// A Markov chain with nested target levels and a kill set.
pub trait LevelProcess: Sync {
    type State: Clone + Send + Sync;
    fn start(&self) -> Self::State;
    fn step(&self, z: &Self::State, rng: &mut StreamRng) -> Self::State;
    fn num_levels(&self) -> usize;
    /// Whether `z` has reached level `level` (0-based).
    fn reached(&self, level: usize, z: &Self::State) -> bool;
    fn killed(&self, z: &Self::State) -> bool;
    /// Upper bound on chain steps per segment; exceeding it kills the particle.
    fn max_steps(&self) -> usize;
}

/// Nearest-neighbour walk on the integers, up with probability `p_up`.
/// Killed on reaching `lower`; level `k` is reached at `z >= levels[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWalkChain {
    pub start: i64,
    pub lower: i64,
    pub p_up: f64,
    pub levels: Vec<i64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    1_000_000
}

impl RandomWalkChain {
    pub fn new(start: i64, lower: i64, p_up: f64, levels: Vec<i64>) -> Result<Self> {
        let chain = RandomWalkChain { start, lower, p_up, levels, max_steps: default_max_steps() };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_up) {
            return Err(SmcError::InvalidInput("p_up must lie in [0, 1]".into()));
        }
        if self.levels.is_empty() {
            return Err(SmcError::InvalidInput("levels must be non-empty".into()));
        }
        if self.levels.windows(2).any(|w| w[1] < w[0]) {
            return Err(SmcError::InvalidInput("levels must be non-decreasing".into()));
        }
        if self.start <= self.lower || self.levels[0] <= self.lower {
            return Err(SmcError::InvalidInput("start and levels must lie above the kill boundary".into()));
        }
        if self.max_steps == 0 {
            return Err(SmcError::InvalidInput("max_steps must be positive".into()));
        }
        Ok(())
    }
}

impl LevelProcess for RandomWalkChain {
    type State = i64;

    fn start(&self) -> i64 {
        self.start
    }

    fn step(&self, z: &i64, rng: &mut StreamRng) -> i64 {
        if rng.random::<f64>() < self.p_up { z + 1 } else { z - 1 }
    }

    fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn reached(&self, level: usize, z: &i64) -> bool {
        *z >= self.levels[level]
    }

    fn killed(&self, z: &i64) -> bool {
        *z <= self.lower
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }
}

/// Exact `P(hit upper before lower)` for the walk started at `start`.
pub fn gamblers_ruin_probability(start: i64, lower: i64, upper: i64, p_up: f64) -> f64 {
    let i = (start - lower) as f64;
    let n = (upper - lower) as f64;
    if p_up == 0.5 {
        return i / n;
    }
    let ratio = (1.0 - p_up) / p_up;
    (1.0 - ratio.powf(i)) / (1.0 - ratio.powf(n))
}

/// Result of one splitting run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingEstimate {
    /// Survivor fraction at each level processed.
    pub fractions: Vec<f64>,
    /// Product of the fractions.
    pub estimate: f64,
    /// Level at which every particle died, if any.
    pub extinct_at: Option<usize>,
    /// Chain steps used across all particles and levels.
    pub total_steps: u64,
}

enum Segment<S> {
    Survived(S, u64),
    Died(u64),
}

fn run_segment<P: LevelProcess>(lp: &P, level: usize, mut z: P::State, rng: &mut StreamRng) -> (Segment<P::State>, bool) {
    let mut steps = 0u64;
    loop {
        if lp.killed(&z) {
            return (Segment::Died(steps), false);
        }
        if lp.reached(level, &z) {
            return (Segment::Survived(z, steps), false);
        }
        if steps as usize >= lp.max_steps() {
            return (Segment::Died(steps), true);
        }
        z = lp.step(&z, rng);
        steps += 1;
    }
}

/// One fixed-effort splitting run with `n` particles. Level `k` advances
/// particle `i` with `seeder.child(k).child(i)` and duplicates with
/// `seeder.child(k).named("duplicate")`.
pub fn splitting_run<P: LevelProcess>(lp: &P, n: usize, seeder: Seeder) -> Result<SplittingEstimate> {
    if n == 0 {
        return Err(SmcError::InvalidInput("number of particles must be positive".into()));
    }
    let mut particles = vec![lp.start(); n];
    let mut fractions = Vec::with_capacity(lp.num_levels());
    let mut estimate = 1.0;
    let mut total_steps = 0u64;
    for level in 0..lp.num_levels() {
        let level_seeder = seeder.child(level as u64);
        let results = par_map(n, |i| run_segment(lp, level, particles[i].clone(), &mut level_seeder.child(i as u64).rng()));
        let timeouts = results.iter().filter(|r| r.1).count();
        if timeouts > 0 {
            warn!("{timeouts} trajectories exceeded max_steps at level {level}; counted as killed");
        }
        let mut survivors = Vec::new();
        for (seg, _) in results {
            match seg {
                Segment::Survived(z, s) => {
                    total_steps += s;
                    survivors.push(z);
                }
                Segment::Died(s) => total_steps += s,
            }
        }
        let fraction = survivors.len() as f64 / n as f64;
        fractions.push(fraction);
        estimate *= fraction;
        if survivors.is_empty() {
            return Ok(SplittingEstimate { fractions, estimate: 0.0, extinct_at: Some(level), total_steps });
        }
        if level + 1 < lp.num_levels() {
            let u: f64 = level_seeder.named("duplicate").rng().sample(Open01);
            let counts = systematic_resample(&WeightVector::uniform(survivors.len()), n, u)?;
            particles = counts.ancestors().into_iter().map(|a| survivors[a].clone()).collect();
        }
    }
    Ok(SplittingEstimate { fractions, estimate, extinct_at: None, total_steps })
}

/// Independent replications of [`splitting_run`]; replication `r` uses
/// `seeder.child(r)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicatedEstimate {
    pub mean: f64,
    /// Standard error of the mean; absent for a single replication.
    pub standard_error: Option<f64>,
    pub replications: usize,
    pub runs: Vec<SplittingEstimate>,
}

impl ReplicatedEstimate {
    pub fn estimates(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.estimate).collect()
    }

    /// Mean survivor fraction per level over the runs that reached it.
    pub fn mean_fractions(&self) -> Vec<f64> {
        let levels = self.runs.iter().map(|r| r.fractions.len()).max().unwrap_or(0);
        (0..levels)
            .map(|k| {
                let fs: Vec<f64> = self.runs.iter().filter_map(|r| r.fractions.get(k).copied()).collect();
                stats::mean(&fs)
            })
            .collect()
    }
}

pub fn splitting_replicated<P: LevelProcess>(
    lp: &P,
    n: usize,
    replications: usize,
    seeder: Seeder,
) -> Result<ReplicatedEstimate> {
    if replications == 0 {
        return Err(SmcError::InvalidInput("replications must be positive".into()));
    }
    let runs = (0..replications)
        .map(|r| splitting_run(lp, n, seeder.child(r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let estimates: Vec<f64> = runs.iter().map(|r| r.estimate).collect();
    let mean = stats::mean(&estimates);
    let standard_error = (replications > 1).then(|| stats::standard_error(&estimates));
    Ok(ReplicatedEstimate { mean, standard_error, replications, runs })
}
