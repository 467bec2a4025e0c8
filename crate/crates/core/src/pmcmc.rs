//! Particle marginal Metropolis-Hastings.
//!
//! A Metropolis-Hastings chain on the parameter in which the intractable
//! likelihood `p(y_{1:T} | theta)` is replaced by the particle filter's
//! unbiased estimate. The estimate attached to the current state is the one
//! computed when that state was proposed and is never refreshed; with that
//! discipline the chain targets the exact posterior for any particle count.
//! The embedded filter always resamples multinomially.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::filter::{run_filter, FilterConfig, ResampleConfig};
use crate::model::{Observation, ParametricSsm, StateSpaceModel};
use crate::rng::{Seeder, StreamRng};

/// Proposal `q(theta' | theta)` for the parameter.
pub trait ProposalKernel: Sync {
    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> Vec<f64>;
    /// `log q(to | from)`.
    fn log_density(&self, from: &[f64], to: &[f64]) -> f64;
}

/// Symmetric Gaussian random walk with independent per-coordinate scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRandomWalk {
    pub scales: Vec<f64>,
}

impl ProposalKernel for GaussianRandomWalk {
    fn sample(&self, theta: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.scales)
            .map(|(t, s)| t + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn log_density(&self, from: &[f64], to: &[f64]) -> f64 {
        from.iter()
            .zip(to)
            .zip(&self.scales)
            .map(|((a, b), s)| crate::gaussian::normal_log_density(*b, *a, *s))
            .sum()
    }
}

/// Current state of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PmmhState<S> {
    pub theta: Vec<f64>,
    pub log_prior: f64,
    /// Log of the particle estimate produced when `theta` was proposed.
    pub log_likelihood: f64,
    pub path: Option<Vec<S>>,
    pub iteration: usize,
}

/// Settings of the embedded particle filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmmhConfig {
    pub n_particles: usize,
    /// Sample a state path with every proposal.
    pub store_paths: bool,
}

impl PmmhConfig {
    fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            resample: ResampleConfig::always_multinomial(),
            store_ensembles: self.store_paths,
        }
    }
}

struct Estimate<S> {
    log_likelihood: f64,
    path: Option<Vec<S>>,
}

fn estimate<P: ParametricSsm>(
    family: &P,
    theta: &[f64],
    ys: &[Observation],
    cfg: &PmmhConfig,
    seeder: Seeder,
) -> Result<Estimate<<P::Model as StateSpaceModel>::State>> {
    let model = family.build(theta)?;
    let trace = run_filter(&model, ys, &cfg.filter_config(), seeder.named("filter"))?;
    let path = if cfg.store_paths { trace.sample_path(&mut seeder.named("path").rng()) } else { None };
    Ok(Estimate { log_likelihood: trace.log_likelihood(), path })
}

/// Starts a chain at `theta`, which must have positive prior density.
pub fn pmmh_init<P: ParametricSsm>(
    family: &P,
    theta: Vec<f64>,
    ys: &[Observation],
    cfg: &PmmhConfig,
    seeder: Seeder,
) -> Result<PmmhState<<P::Model as StateSpaceModel>::State>> {
    if theta.len() != family.param_dim() {
        return Err(SmcError::Dimension(format!("theta has length {}, expected {}", theta.len(), family.param_dim())));
    }
    let log_prior = family.log_prior(&theta);
    if log_prior == f64::NEG_INFINITY {
        return Err(SmcError::InvalidInput("initial theta has zero prior density".into()));
    }
    let est = estimate(family, &theta, ys, cfg, seeder)?;
    Ok(PmmhState { theta, log_prior, log_likelihood: est.log_likelihood, path: est.path, iteration: 0 })
}

/// One PMMH transition. Returns the new state and whether the proposal
/// was accepted.
pub fn pmmh_step<P, Q>(
    cur: &PmmhState<<P::Model as StateSpaceModel>::State>,
    family: &P,
    ys: &[Observation],
    q: &Q,
    cfg: &PmmhConfig,
    seeder: Seeder,
) -> Result<(PmmhState<<P::Model as StateSpaceModel>::State>, bool)>
where
    P: ParametricSsm,
    Q: ProposalKernel,
{
    let iteration = cur.iteration + 1;
    let reject = || (PmmhState { iteration, ..cur.clone() }, false);

    let proposal = q.sample(&cur.theta, &mut seeder.named("propose").rng());
    let log_prior = family.log_prior(&proposal);
    if log_prior == f64::NEG_INFINITY {
        return Ok(reject());
    }
    let est = match estimate(family, &proposal, ys, cfg, seeder) {
        Ok(e) => e,
        Err(e @ (SmcError::DegenerateWeights { .. } | SmcError::Numerical { .. })) => {
            warn!("particle filter failed at proposed theta {proposal:?} ({e}); rejecting");
            return Ok(reject());
        }
        Err(e) => return Err(e),
    };
    let log_ratio = (est.log_likelihood + log_prior + q.log_density(&proposal, &cur.theta))
        - (cur.log_likelihood + cur.log_prior + q.log_density(&cur.theta, &proposal));
    let u: f64 = seeder.named("accept").rng().random();
    if u.ln() < log_ratio {
        let next = PmmhState {
            theta: proposal,
            log_prior,
            log_likelihood: est.log_likelihood,
            path: est.path,
            iteration,
        };
        Ok((next, true))
    } else {
        Ok(reject())
    }
}

/// Post-burn-in output of [`run_pmmh`].
#[derive(Debug, Clone, PartialEq)]
pub struct PmmhChain<S> {
    pub thetas: Vec<Vec<f64>>,
    pub log_likelihoods: Vec<f64>,
    pub accepted: Vec<bool>,
    pub paths: Option<Vec<Vec<S>>>,
}

impl<S> PmmhChain<S> {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    /// Fraction of accepted proposals; `None` for an empty chain.
    pub fn acceptance_rate(&self) -> Option<f64> {
        (!self.accepted.is_empty())
            .then(|| self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64)
    }

    /// Trace of one parameter coordinate.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.thetas.iter().map(|t| t[i]).collect()
    }
}

/// Runs `burn_in + iterations` transitions from `init` and keeps the last
/// `iterations`. Iteration `k` uses the stream `seeder.child(k)`.
#[allow(clippy::too_many_arguments)]
pub fn run_pmmh<P, Q>(
    family: &P,
    ys: &[Observation],
    q: &Q,
    init: Vec<f64>,
    iterations: usize,
    burn_in: usize,
    cfg: &PmmhConfig,
    seeder: Seeder,
) -> Result<PmmhChain<<P::Model as StateSpaceModel>::State>>
where
    P: ParametricSsm,
    Q: ProposalKernel,
{
    let mut chain = PmmhChain {
        thetas: Vec::with_capacity(iterations),
        log_likelihoods: Vec::with_capacity(iterations),
        accepted: Vec::with_capacity(iterations),
        paths: cfg.store_paths.then(Vec::new),
    };
    if iterations == 0 {
        return Ok(chain);
    }
    let mut state = pmmh_init(family, init, ys, cfg, seeder.named("init"))?;
    for k in 1..=(burn_in + iterations) {
        let (next, accepted) = pmmh_step(&state, family, ys, q, cfg, seeder.child(k as u64))?;
        state = next;
        if k > burn_in {
            chain.thetas.push(state.theta.clone());
            chain.log_likelihoods.push(state.log_likelihood);
            chain.accepted.push(accepted);
            if let (Some(paths), Some(p)) = (chain.paths.as_mut(), state.path.as_ref()) {
                paths.push(p.clone());
            }
        }
    }
    Ok(chain)
}
