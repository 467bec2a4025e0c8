//! Bootstrap (SIR) and auxiliary particle filters.
//!
//! One step resamples first and then propagates: the input ensemble
//! approximates `pi_{n-1}`, the output approximates `pi_n`. With ESS gating
//! enabled, resampling is skipped when the weights are balanced enough and
//! the old weights are carried through propagation
//! (`W_n ∝ W_{n-1} g(y_n | X_n)`). The likelihood increment is always
//! `log sum_i W~_i w_i + log sum_k W_k r_k`, where `W~` are the weights
//! entering propagation (uniform after resampling) and `r` is the lookahead
//! (identically 1 for SIR). This is the textbook `(1/N) sum g(y_n | X_n^i)`
//! when every step resamples, and keeps the product over steps unbiased
//! otherwise.
//!
//! Particle `i` at step `n` draws from the stream `seeder.child(n).child(i)`,
//! so results are identical whether particles are processed sequentially or
//! in parallel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::gaussian::GaussianNoise;
use crate::model::{FiniteHmm, LinearGaussianSsm, Observation, StateSpaceModel};
use crate::resample::{
    ess, log_sum_exp, multinomial_resample, should_resample, ResamplingScheme, WeightVector,
    DEFAULT_ESS_THRESHOLD,
};
use crate::rng::{Seeder, StreamRng};

/// Below this many items per-particle work runs sequentially.
const PAR_THRESHOLD: usize = 256;

pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Weighted particle approximation `sum_i W_i delta_{X_i}` at step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble<S> {
    pub states: Vec<S>,
    pub weights: WeightVector,
    pub step: usize,
}

impl<S: Clone + Send + Sync> ParticleEnsemble<S> {
    pub fn new(states: Vec<S>, weights: WeightVector, step: usize) -> Result<Self> {
        if states.len() != weights.len() {
            return Err(SmcError::Dimension(format!(
                "{} states but {} weights",
                states.len(),
                weights.len()
            )));
        }
        if !weights.is_normalized() {
            return Err(SmcError::NotNormalized);
        }
        Ok(ParticleEnsemble { states, weights, step })
    }

    /// Equally weighted states at step 0.
    pub fn uniform(states: Vec<S>) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(SmcError::InvalidInput("ensemble needs at least one particle".into()));
        }
        Self::new(states, WeightVector::uniform(n), 0)
    }

    /// `n` independent draws from the model's initial law.
    pub fn from_prior<M>(model: &M, n: usize, seeder: Seeder) -> Result<Self>
    where
        M: StateSpaceModel<State = S>,
    {
        Self::uniform(par_map(n, |i| model.sample_initial(&mut seeder.child(i as u64).rng())))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights).expect("ensemble weights are normalized")
    }

    /// Weighted mean of the model's state features.
    pub fn weighted_mean<M>(&self, model: &M) -> Vec<f64>
    where
        M: StateSpaceModel<State = S>,
    {
        weighted_mean_with(model, &self.states, self.weights.log_weights())
    }
}

pub(crate) fn weighted_mean_with<M: StateSpaceModel>(
    model: &M,
    states: &[M::State],
    log_weights: &[f64],
) -> Vec<f64> {
    let d = model.state_dim();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for (x, lw) in states.iter().zip(log_weights) {
        let w = lw.exp();
        if w == 0.0 {
            continue;
        }
        model.write_features(x, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    acc
}

/// Resampling settings shared by every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub scheme: ResamplingScheme,
    /// Resample only when `ESS < threshold * N`; `None` resamples every step.
    pub ess_threshold: Option<f64>,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig { scheme: ResamplingScheme::Systematic, ess_threshold: Some(DEFAULT_ESS_THRESHOLD) }
    }
}

impl ResampleConfig {
    /// Multinomial resampling at every step.
    pub fn always_multinomial() -> Self {
        ResampleConfig { scheme: ResamplingScheme::Multinomial, ess_threshold: None }
    }

    pub fn always(scheme: ResamplingScheme) -> Self {
        ResampleConfig { scheme, ess_threshold: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub resample: ResampleConfig,
    /// Keep every weighted ensemble and the ancestry (needed for smoothing
    /// and path sampling).
    pub store_ensembles: bool,
}

impl FilterConfig {
    pub fn new(n_particles: usize) -> Self {
        FilterConfig { n_particles, resample: ResampleConfig::default(), store_ensembles: false }
    }

    pub fn with_resample(mut self, resample: ResampleConfig) -> Self {
        self.resample = resample;
        self
    }

    pub fn storing(mut self) -> Self {
        self.store_ensembles = true;
        self
    }
}

/// Result of one filter step.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub ensemble: ParticleEnsemble<S>,
    pub log_lik_increment: f64,
    pub resampled: bool,
    /// Index in the input ensemble of each output particle's parent.
    pub ancestors: Vec<usize>,
}

/// Lookahead weights and proposal for the auxiliary particle filter.
///
/// The step reweights by `r(x_{n-1}, y_n)`, resamples, draws from
/// `Q(. | x, y_n)` and corrects with `g(y_n | x') / r(x, y_n) * dP/dQ(x')`.
pub trait AuxiliarySpec<M: StateSpaceModel>: Sync {
    /// `log r(x, y)`.
    fn log_lookahead(&self, x: &M::State, y: &[f64]) -> f64;

    fn sample_proposal(&self, x: &M::State, y: &[f64], rng: &mut StreamRng) -> M::State;

    /// `log q(x_new | x, y)`.
    fn proposal_log_density(&self, x: &M::State, y: &[f64], x_new: &M::State) -> f64;

    /// `log dP(.|x)/dQ(.|x,y)` at `x_new`. Override when the ratio has a
    /// closed form.
    fn log_transition_ratio(&self, model: &M, x: &M::State, y: &[f64], x_new: &M::State) -> f64 {
        model
            .transition_log_density(x, x_new)
            .expect("auxiliary filter checked for a transition density")
            - self.proposal_log_density(x, y, x_new)
    }
}

struct Moves<L, P, W> {
    lookahead: L,
    propagate: P,
    log_ratio: W,
}

fn advance<M, L, P, W>(
    ens: &ParticleEnsemble<M::State>,
    y: &[f64],
    model: &M,
    cfg: &ResampleConfig,
    seeder: Seeder,
    moves: Moves<L, P, W>,
) -> Result<StepOutput<M::State>>
where
    M: StateSpaceModel,
    L: Fn(&M::State) -> f64 + Sync + Send,
    P: Fn(&M::State, &mut StreamRng) -> M::State + Sync + Send,
    W: Fn(&M::State, &M::State) -> f64 + Sync + Send,
{
    let n = ens.len();
    let step = ens.step + 1;

    let log_r: Vec<f64> = par_map(n, |i| (moves.lookahead)(&ens.states[i]));
    let mut pre = WeightVector::from_log(
        ens.weights.log_weights().iter().zip(&log_r).map(|(w, r)| w + r).collect(),
    )
    .map_err(|_| SmcError::Numerical { step, message: "NaN lookahead weight".into() })?;
    let log_r_mass = pre.normalize().ok_or(SmcError::DegenerateWeights { step })?;

    let resampled = match cfg.ess_threshold {
        None => true,
        Some(t) => should_resample(&pre, t)?,
    };
    let (ancestors, carried): (Vec<usize>, Vec<f64>) = if resampled {
        let counts = cfg.scheme.resample(&pre, n, &mut seeder.named("resample").rng())?;
        (counts.ancestors(), vec![-(n as f64).ln(); n])
    } else {
        ((0..n).collect(), pre.log_weights().to_vec())
    };

    let moved: Vec<(M::State, f64)> = par_map(n, |i| {
        let parent = &ens.states[ancestors[i]];
        let mut rng = seeder.child(i as u64).rng();
        let x = (moves.propagate)(parent, &mut rng);
        let lw = if carried[i] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            let lg = model.obs_log_density(&x, y);
            carried[i] + ((lg - log_r[ancestors[i]]) + (moves.log_ratio)(parent, &x))
        };
        (x, lw)
    });
    let (states, log_w): (Vec<_>, Vec<_>) = moved.into_iter().unzip();
    if log_w.iter().any(|w| w.is_nan()) {
        return Err(SmcError::Numerical { step, message: "NaN particle weight".into() });
    }
    let mut weights = WeightVector::from_log(log_w)?;
    let log_mass = weights.normalize().ok_or(SmcError::DegenerateWeights { step })?;
    Ok(StepOutput {
        ensemble: ParticleEnsemble { states, weights, step },
        log_lik_increment: log_mass + log_r_mass,
        resampled,
        ancestors,
    })
}

/// One bootstrap step: resample (if due), propagate through the model's
/// transition, reweight by `g(y | x)`.
pub fn sir_step<M: StateSpaceModel>(
    ens: &ParticleEnsemble<M::State>,
    y: &[f64],
    model: &M,
    cfg: &ResampleConfig,
    seeder: Seeder,
) -> Result<StepOutput<M::State>> {
    advance(
        ens,
        y,
        model,
        cfg,
        seeder,
        Moves {
            lookahead: |_: &M::State| 0.0,
            propagate: |x: &M::State, rng: &mut StreamRng| model.sample_transition(x, rng),
            log_ratio: |_: &M::State, _: &M::State| 0.0,
        },
    )
}

/// One auxiliary particle filter step. Fails if the model has no
/// transition density.
pub fn apf_step<M, A>(
    ens: &ParticleEnsemble<M::State>,
    y: &[f64],
    model: &M,
    aux: &A,
    cfg: &ResampleConfig,
    seeder: Seeder,
) -> Result<StepOutput<M::State>>
where
    M: StateSpaceModel,
    A: AuxiliarySpec<M>,
{
    if !model.has_transition_density() {
        return Err(SmcError::MissingTransitionDensity { algorithm: "auxiliary particle filter" });
    }
    advance(
        ens,
        y,
        model,
        cfg,
        seeder,
        Moves {
            lookahead: |x: &M::State| aux.log_lookahead(x, y),
            propagate: |x: &M::State, rng: &mut StreamRng| aux.sample_proposal(x, y, rng),
            log_ratio: |x: &M::State, x_new: &M::State| aux.log_transition_ratio(model, x, y, x_new),
        },
    )
}

/// Per-step summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub mean: Vec<f64>,
    pub ess: f64,
    pub log_lik_increment: f64,
    pub resampled: bool,
}

/// Output of a filter run over `y_1..y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace<S> {
    pub steps: Vec<StepSummary>,
    /// Weighted ensembles for `n = 0..T` when stored.
    pub ensembles: Option<Vec<ParticleEnsemble<S>>>,
    /// `ancestry[n - 1][i]`: parent at step `n - 1` of particle `i` at step `n`.
    pub ancestry: Option<Vec<Vec<usize>>>,
}

impl<S: Clone + Send + Sync> FilterTrace<S> {
    pub fn log_likelihood(&self) -> f64 {
        self.steps.iter().map(|s| s.log_lik_increment).sum()
    }

    /// Draws one path `x_{0:T}` from the particle approximation of the joint
    /// smoothing distribution by following the ancestry of a particle picked
    /// with the final weights. `None` if ensembles were not stored.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<S>> {
        let ensembles = self.ensembles.as_ref()?;
        let ancestry = self.ancestry.as_ref()?;
        let last = ensembles.last()?;
        let counts = multinomial_resample(&last.weights, 1, rng).ok()?;
        let mut idx = counts.ancestors()[0];
        let mut path = Vec::with_capacity(ensembles.len());
        path.push(last.states[idx].clone());
        for n in (0..ancestry.len()).rev() {
            idx = ancestry[n][idx];
            path.push(ensembles[n].states[idx].clone());
        }
        path.reverse();
        Some(path)
    }
}

fn run_with<M, F>(
    model: &M,
    ys: &[Observation],
    config: &FilterConfig,
    seeder: Seeder,
    mut step_fn: F,
) -> Result<FilterTrace<M::State>>
where
    M: StateSpaceModel,
    F: FnMut(&ParticleEnsemble<M::State>, &[f64], Seeder) -> Result<StepOutput<M::State>>,
{
    if config.n_particles == 0 {
        return Err(SmcError::InvalidInput("n_particles must be at least 1".into()));
    }
    for (i, y) in ys.iter().enumerate() {
        if y.len() != model.obs_dim() {
            return Err(SmcError::Dimension(format!(
                "observation {} has length {}, model expects {}",
                i + 1,
                y.len(),
                model.obs_dim()
            )));
        }
    }
    let mut ens = ParticleEnsemble::from_prior(model, config.n_particles, seeder.named("init"))?;
    let mut steps = Vec::with_capacity(ys.len());
    let mut ensembles = config.store_ensembles.then(|| vec![ens.clone()]);
    let mut ancestry = config.store_ensembles.then(Vec::new);
    for (i, y) in ys.iter().enumerate() {
        let out = step_fn(&ens, y, seeder.child(i as u64 + 1))?;
        ens = out.ensemble;
        steps.push(StepSummary {
            step: ens.step,
            mean: ens.weighted_mean(model),
            ess: ens.ess(),
            log_lik_increment: out.log_lik_increment,
            resampled: out.resampled,
        });
        if let Some(store) = ensembles.as_mut() {
            store.push(ens.clone());
        }
        if let Some(anc) = ancestry.as_mut() {
            anc.push(out.ancestors);
        }
    }
    Ok(FilterTrace { steps, ensembles, ancestry })
}

/// Bootstrap filter over the whole observation sequence.
pub fn run_filter<M: StateSpaceModel>(
    model: &M,
    ys: &[Observation],
    config: &FilterConfig,
    seeder: Seeder,
) -> Result<FilterTrace<M::State>> {
    run_with(model, ys, config, seeder, |ens, y, s| sir_step(ens, y, model, &config.resample, s))
}

/// Auxiliary particle filter over the whole observation sequence.
pub fn run_apf<M, A>(
    model: &M,
    ys: &[Observation],
    config: &FilterConfig,
    aux: &A,
    seeder: Seeder,
) -> Result<FilterTrace<M::State>>
where
    M: StateSpaceModel,
    A: AuxiliarySpec<M>,
{
    if !model.has_transition_density() {
        return Err(SmcError::MissingTransitionDensity { algorithm: "auxiliary particle filter" });
    }
    run_with(model, ys, config, seeder, |ens, y, s| apf_step(ens, y, model, aux, &config.resample, s))
}

/// Locally optimal lookahead and proposal for a linear-Gaussian model:
/// `r(x, y) = N(y; H F x, H V H' + R)` and `Q(. | x, y)` the exact
/// conditional law of `x_n` given `x_{n-1} = x` and `y_n = y`. With these
/// choices the final weights are constant.
#[derive(Debug, Clone)]
pub struct LinearGaussianOptimal {
    model: LinearGaussianSsm,
    /// Marginal of `y_n` given `x_{n-1}`: covariance `H V H' + R`.
    lookahead_noise: GaussianNoise,
    proposal_noise: GaussianNoise,
    gain: DMatrix<f64>,
}

impl LinearGaussianOptimal {
    pub fn new(model: &LinearGaussianSsm) -> Result<Self> {
        let h = model.obs_matrix();
        let v = model.state_cov();
        let mut s = h * v * h.transpose() + model.obs_cov();
        crate::gaussian::symmetrize(&mut s);
        let chol = s.clone().cholesky().ok_or_else(|| SmcError::Numerical {
            step: 0,
            message: "H V H' + R is not positive definite".into(),
        })?;
        let gain = chol.solve(&(h * v)).transpose();
        let d = v.nrows();
        let mut post = (DMatrix::identity(d, d) - &gain * h) * v;
        crate::gaussian::symmetrize(&mut post);
        Ok(LinearGaussianOptimal {
            model: model.clone(),
            lookahead_noise: GaussianNoise::new(s)?,
            proposal_noise: GaussianNoise::new(post)?,
            gain,
        })
    }

    fn proposal_mean(&self, x: &DVector<f64>, y: &[f64]) -> DVector<f64> {
        let fx = self.model.transition_matrix() * x;
        let innovation = DVector::from_column_slice(y) - self.model.obs_matrix() * &fx;
        fx + &self.gain * innovation
    }
}

impl AuxiliarySpec<LinearGaussianSsm> for LinearGaussianOptimal {
    fn log_lookahead(&self, x: &DVector<f64>, y: &[f64]) -> f64 {
        let mean = self.model.obs_matrix() * (self.model.transition_matrix() * x);
        self.lookahead_noise.log_density(y, mean.as_slice()).expect("PD by construction")
    }

    fn sample_proposal(&self, x: &DVector<f64>, y: &[f64], rng: &mut StreamRng) -> DVector<f64> {
        self.proposal_noise.sample(&self.proposal_mean(x, y), rng)
    }

    fn proposal_log_density(&self, x: &DVector<f64>, y: &[f64], x_new: &DVector<f64>) -> f64 {
        self.proposal_noise
            .log_density(x_new.as_slice(), self.proposal_mean(x, y).as_slice())
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// `p(x'|x) g(y|x') = r(x, y) q(x'|x, y)`, so `dP/dQ = r / g`.
    fn log_transition_ratio(
        &self,
        model: &LinearGaussianSsm,
        x: &DVector<f64>,
        y: &[f64],
        x_new: &DVector<f64>,
    ) -> f64 {
        self.log_lookahead(x, y) - model.obs_log_density(x_new, y)
    }
}

/// Exact auxiliary choices for a finite HMM: `r(x, y) = sum_k P(x, k) g(y | k)`
/// and `Q(k | x, y) ∝ P(x, k) g(y | k)`. The final weights are constant.
#[derive(Debug, Clone)]
pub struct FiniteHmmOptimal {
    model: FiniteHmm,
}

impl FiniteHmmOptimal {
    pub fn new(model: &FiniteHmm) -> Self {
        FiniteHmmOptimal { model: model.clone() }
    }

    /// `log P(x, k) + log g(y | k)` for every `k`.
    fn joint(&self, x: usize, y: &[f64]) -> Vec<f64> {
        self.model.trans()[x]
            .iter()
            .enumerate()
            .map(|(k, p)| p.ln() + self.model.emission_log_density(k, y))
            .collect()
    }
}

impl AuxiliarySpec<FiniteHmm> for FiniteHmmOptimal {
    fn log_lookahead(&self, x: &usize, y: &[f64]) -> f64 {
        log_sum_exp(&self.joint(*x, y))
    }

    fn sample_proposal(&self, x: &usize, y: &[f64], rng: &mut StreamRng) -> usize {
        let joint = self.joint(*x, y);
        let total = log_sum_exp(&joint);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, lj) in joint.iter().enumerate() {
            if *lj == f64::NEG_INFINITY {
                continue;
            }
            last = k;
            acc += (lj - total).exp();
            if u < acc {
                return k;
            }
        }
        last
    }

    fn proposal_log_density(&self, x: &usize, y: &[f64], x_new: &usize) -> f64 {
        let joint = self.joint(*x, y);
        joint[*x_new] - log_sum_exp(&joint)
    }

    /// `P(x, x') g(y | x') = r(x, y) q(x' | x, y)`, so `dP/dQ = r / g`.
    fn log_transition_ratio(&self, model: &FiniteHmm, x: &usize, y: &[f64], x_new: &usize) -> f64 {
        self.log_lookahead(x, y) - model.obs_log_density(x_new, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Emission;

    /// g(y | x) does not depend on x.
    struct FlatObs;
    impl StateSpaceModel for FlatObs {
        type State = f64;
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            rng.random()
        }
        fn sample_transition<R: Rng + ?Sized>(&self, x: &f64, rng: &mut R) -> f64 {
            x + rng.random::<f64>()
        }
        fn obs_log_density(&self, _x: &f64, _y: &[f64]) -> f64 {
            -1.25
        }
        fn sample_observation<R: Rng + ?Sized>(&self, _x: &f64, _rng: &mut R) -> Observation {
            vec![0.0]
        }
        fn write_features(&self, x: &f64, out: &mut [f64]) {
            out[0] = *x;
        }
    }

    /// Random walk on the integers observed through `1{x > 0}`.
    struct Survival;
    impl StateSpaceModel for Survival {
        type State = i64;
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn sample_initial<R: Rng + ?Sized>(&self, _rng: &mut R) -> i64 {
            3
        }
        fn sample_transition<R: Rng + ?Sized>(&self, x: &i64, rng: &mut R) -> i64 {
            if rng.random::<bool>() { x + 1 } else { x - 1 }
        }
        fn obs_log_density(&self, x: &i64, _y: &[f64]) -> f64 {
            if *x > 0 { 0.0 } else { f64::NEG_INFINITY }
        }
        fn sample_observation<R: Rng + ?Sized>(&self, _x: &i64, _rng: &mut R) -> Observation {
            vec![1.0]
        }
        fn write_features(&self, x: &i64, out: &mut [f64]) {
            out[0] = *x as f64;
        }
    }

    #[test]
    fn flat_likelihood_keeps_uniform_weights() {
        let ys = vec![vec![0.0]; 4];
        let cfg = FilterConfig::new(50).with_resample(ResampleConfig::always_multinomial());
        let trace = run_filter(&FlatObs, &ys, &cfg, Seeder::new(1)).unwrap();
        for s in &trace.steps {
            assert!((s.log_lik_increment + 1.25).abs() < 1e-12);
            assert!((s.ess - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_sequence_gives_empty_trace() {
        let trace = run_filter(&FlatObs, &[], &FilterConfig::new(10), Seeder::new(0)).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(trace.log_likelihood(), 0.0);
    }

    #[test]
    fn indicator_observations_give_survivor_fractions() {
        let n = 200;
        let ys = vec![vec![1.0]; 6];
        let cfg = FilterConfig::new(n).with_resample(ResampleConfig::always(ResamplingScheme::Systematic)).storing();
        let trace = run_filter(&Survival, &ys, &cfg, Seeder::new(8)).unwrap();
        let ens = trace.ensembles.as_ref().unwrap();
        for (k, s) in trace.steps.iter().enumerate() {
            let alive = ens[k + 1].states.iter().filter(|x| **x > 0).count();
            assert!(alive > 0);
            assert!((s.log_lik_increment - (alive as f64 / n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_likelihood_names_the_step() {
        let ys = vec![vec![1.0]; 100];
        let cfg = FilterConfig::new(3);
        let err = run_filter(&Survival, &ys, &cfg, Seeder::new(2)).unwrap_err();
        assert!(matches!(err, SmcError::DegenerateWeights { step } if step >= 3));
    }

    #[test]
    fn apf_rejects_models_without_density() {
        let m = LinearGaussianSsm::scalar(1.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let good = LinearGaussianSsm::scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let aux = LinearGaussianOptimal::new(&good).unwrap();
        let err = run_apf(&m, &[vec![0.0]], &FilterConfig::new(4), &aux, Seeder::new(0)).unwrap_err();
        assert!(matches!(err, SmcError::MissingTransitionDensity { .. }));
    }

    #[test]
    fn hmm_means_are_probabilities() {
        let hmm = FiniteHmm::new(
            vec![0.5, 0.5],
            vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            Emission::Gaussian { means: vec![0.0, 1.0], sds: vec![1.0, 1.0] },
        )
        .unwrap();
        let trace = run_filter(&hmm, &[vec![0.3], vec![1.4]], &FilterConfig::new(500), Seeder::new(3)).unwrap();
        for s in &trace.steps {
            assert!((s.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_path_follows_ancestry() {
        let m = LinearGaussianSsm::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let ys: Vec<Observation> = (0..5).map(|i| vec![i as f64 * 0.3]).collect();
        let cfg = FilterConfig::new(64).storing();
        let trace = run_filter(&m, &ys, &cfg, Seeder::new(6)).unwrap();
        let path = trace.sample_path(&mut Seeder::new(1).rng()).unwrap();
        assert_eq!(path.len(), 6);
        let ens = trace.ensembles.as_ref().unwrap();
        for (n, x) in path.iter().enumerate() {
            assert!(ens[n].states.contains(x));
        }
        let unstored = run_filter(&m, &ys, &FilterConfig::new(8), Seeder::new(6)).unwrap();
        assert!(unstored.sample_path(&mut Seeder::new(1).rng()).is_none());
    }

    #[test]
    fn ess_gated_run_skips_resampling_when_balanced() {
        let m = LinearGaussianSsm::scalar(0.9, 1.0, 1.0, 100.0, 0.0, 1.0).unwrap();
        let ys: Vec<Observation> = vec![vec![0.1]; 5];
        let trace = run_filter(&m, &ys, &FilterConfig::new(200), Seeder::new(2)).unwrap();
        // Step 1 starts from uniform weights, so it never resamples.
        assert!(!trace.steps[0].resampled);
        assert!(trace.steps.iter().all(|s| !s.resampled));
    }

    #[test]
    fn parallel_and_sequential_paths_agree() {
        let m = LinearGaussianSsm::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let ys: Vec<Observation> = (0..4).map(|i| vec![i as f64]).collect();
        let cfg = FilterConfig::new(PAR_THRESHOLD + 10);
        let a = run_filter(&m, &ys, &cfg, Seeder::new(12)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_filter(&m, &ys, &cfg, Seeder::new(12)).unwrap());
        assert_eq!(a.steps, b.steps);
    }
}
