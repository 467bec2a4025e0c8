//! SMC samplers for a sequence of targets `pi_0, ..., pi_T` on `R^d`.
//!
//! Each step reweights by the incremental ratio `pi_n / pi_{n-1}` at the
//! current particles, resamples when the ESS falls below the threshold, and
//! then moves every particle with a Markov kernel that leaves `pi_n`
//! invariant. Moves never touch weights. The running sum of
//! `log sum_i W_i w_i` estimates `log(Z_T / Z_0)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::filter::{par_map, ParticleEnsemble, ResampleConfig};
use crate::gaussian::{normal_log_density, GaussianNoise};
use crate::resample::{log_sum_exp, should_resample, LogSumExp, WeightVector};
use crate::rng::{Seeder, StreamRng};

/// Unnormalized log density on `R^d`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

/// A density that can also be sampled exactly (used for `pi_0`).
pub trait SampleableDensity: LogDensity {
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64>;
}

/// Mixture of Gaussians with diagonal covariances, scaled by `exp(log_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianMixture {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sds: Vec<Vec<f64>>,
    log_scale: f64,
}

impl DiagGaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<Vec<f64>>, log_scale: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != sds.len() {
            return Err(SmcError::Dimension("mixture needs matching, non-empty weights, means and sds".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().chain(&sds).any(|v| v.len() != d) {
            return Err(SmcError::Dimension("mixture components must share one positive dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(SmcError::InvalidInput("mixture weights must be non-negative and sum to 1".into()));
        }
        if sds.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(SmcError::InvalidInput("mixture sds must be positive".into()));
        }
        if !log_scale.is_finite() {
            return Err(SmcError::InvalidInput("log_scale must be finite".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(DiagGaussianMixture { log_weights, weights, means, sds, log_scale })
    }

    /// A single Gaussian `N(mean, diag(sd^2))`.
    pub fn gaussian(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        DiagGaussianMixture::new(vec![1.0], vec![mean], vec![sd], 0.0)
    }

    /// Total mass `exp(log_scale)`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_scale
    }
}

impl LogDensity for DiagGaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = LogSumExp::default();
        for ((lw, mean), sd) in self.log_weights.iter().zip(&self.means).zip(&self.sds) {
            let comp: f64 = x.iter().zip(mean).zip(sd).map(|((x, m), s)| normal_log_density(*x, *m, *s)).sum();
            acc.add(lw + comp);
        }
        self.log_scale + acc.value()
    }
}

impl SampleableDensity for DiagGaussianMixture {
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut c = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            c += w;
            if u < c {
                k = j;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.sds[k])
            .map(|(m, s)| m + s * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }
}

/// Config form of [`DiagGaussianMixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
        #[serde(default)]
        log_scale: f64,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sds: Vec<Vec<f64>>,
        #[serde(default)]
        log_scale: f64,
    },
}

impl DensitySpec {
    pub fn build(&self) -> Result<DiagGaussianMixture> {
        match self {
            DensitySpec::Gaussian { mean, sd, log_scale } => {
                DiagGaussianMixture::new(vec![1.0], vec![mean.clone()], vec![sd.clone()], *log_scale)
            }
            DensitySpec::Mixture { weights, means, sds, log_scale } => {
                DiagGaussianMixture::new(weights.clone(), means.clone(), sds.clone(), *log_scale)
            }
        }
    }
}

/// Sequence of targets `pi_0, ..., pi_T`; `pi_0` must be sampleable.
pub trait TargetSequence: Sync {
    fn dim(&self) -> usize;
    /// Number of transitions `T`.
    fn steps(&self) -> usize;
    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64>;
    /// Unnormalized `log pi_n(x)`.
    fn log_target(&self, n: usize, x: &[f64]) -> f64;
    /// `log pi_n(x) - log pi_{n-1}(x)`.
    fn log_increment(&self, n: usize, x: &[f64]) -> f64 {
        let d = self.log_target(n, x) - self.log_target(n - 1, x);
        if d.is_nan() { f64::NEG_INFINITY } else { d }
    }
    /// Position of step `n` in `[0, 1]`, used in error messages.
    fn progress(&self, n: usize) -> f64 {
        n as f64 / self.steps() as f64
    }
}

/// Checks `0 = phi_0 < phi_1 < ... < phi_T = 1`.
pub fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 2 {
        return Err(SmcError::InvalidInput("schedule needs at least two points".into()));
    }
    if schedule[0] != 0.0 || *schedule.last().expect("non-empty") != 1.0 {
        return Err(SmcError::InvalidInput("schedule must start at 0 and end at 1".into()));
    }
    if schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SmcError::InvalidInput("schedule must be strictly increasing".into()));
    }
    Ok(())
}

/// `T + 1` equally spaced exponents from 0 to 1.
pub fn uniform_schedule(steps: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..=steps).map(|n| n as f64 / steps as f64).collect();
    if let Some(last) = s.last_mut() {
        *last = 1.0;
    }
    s
}

/// Geometric bridge `pi_n ∝ pi_0^{1 - phi_n} pi_T^{phi_n}`.
#[derive(Debug, Clone)]
pub struct Tempered<B, T> {
    base: B,
    target: T,
    schedule: Vec<f64>,
}

impl<B: SampleableDensity, T: LogDensity> Tempered<B, T> {
    pub fn new(base: B, target: T, schedule: Vec<f64>) -> Result<Self> {
        validate_schedule(&schedule)?;
        if base.dim() != target.dim() {
            return Err(SmcError::Dimension(format!(
                "base has dimension {}, target {}",
                base.dim(),
                target.dim()
            )));
        }
        Ok(Tempered { base, target, schedule })
    }

    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }
}

impl<B: SampleableDensity, T: LogDensity> TargetSequence for Tempered<B, T> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn steps(&self) -> usize {
        self.schedule.len() - 1
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.base.sample(rng)
    }

    fn log_target(&self, n: usize, x: &[f64]) -> f64 {
        let phi = self.schedule[n];
        let l0 = self.base.log_density(x);
        if phi == 0.0 {
            return l0;
        }
        let lt = self.target.log_density(x);
        if phi == 1.0 {
            return lt;
        }
        if l0 == f64::NEG_INFINITY || lt == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        (1.0 - phi) * l0 + phi * lt
    }

    fn log_increment(&self, n: usize, x: &[f64]) -> f64 {
        let dphi = self.schedule[n] - self.schedule[n - 1];
        if dphi == 0.0 {
            return 0.0;
        }
        let ratio = self.target.log_density(x) - self.base.log_density(x);
        if ratio.is_nan() { f64::NEG_INFINITY } else { dphi * ratio }
    }

    fn progress(&self, n: usize) -> f64 {
        self.schedule[n]
    }
}

/// Data annealing for a static parameter: `pi_n ∝ prior(x) prod_{i<=n} g(y_i | x)`
/// with `y_i ~ N(H x, R)`.
#[derive(Debug, Clone)]
pub struct PosteriorAnnealing<P> {
    prior: P,
    obs_matrix: DMatrix<f64>,
    obs_noise: GaussianNoise,
    observations: Vec<Vec<f64>>,
}

impl<P: SampleableDensity> PosteriorAnnealing<P> {
    pub fn new(prior: P, obs_matrix: DMatrix<f64>, obs_cov: DMatrix<f64>, observations: Vec<Vec<f64>>) -> Result<Self> {
        if obs_matrix.ncols() != prior.dim() || obs_matrix.nrows() != obs_cov.nrows() {
            return Err(SmcError::Dimension("observation matrix does not match prior and noise".into()));
        }
        if observations.is_empty() || observations.iter().any(|y| y.len() != obs_matrix.nrows()) {
            return Err(SmcError::Dimension("observations must be non-empty with the noise dimension".into()));
        }
        let obs_noise = GaussianNoise::new(obs_cov)?;
        if !obs_noise.has_density() {
            return Err(SmcError::InvalidInput("observation covariance must be positive definite".into()));
        }
        Ok(PosteriorAnnealing { prior, obs_matrix, obs_noise, observations })
    }

    fn log_lik(&self, i: usize, x: &[f64]) -> f64 {
        let mean = &self.obs_matrix * DVector::from_column_slice(x);
        self.obs_noise.log_density(&self.observations[i], mean.as_slice()).expect("checked positive definite")
    }
}

impl<P: SampleableDensity> TargetSequence for PosteriorAnnealing<P> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn steps(&self) -> usize {
        self.observations.len()
    }

    fn sample_initial(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.prior.sample(rng)
    }

    fn log_target(&self, n: usize, x: &[f64]) -> f64 {
        self.prior.log_density(x) + (0..n).map(|i| self.log_lik(i, x)).sum::<f64>()
    }

    fn log_increment(&self, n: usize, x: &[f64]) -> f64 {
        self.log_lik(n - 1, x)
    }
}

/// Markov kernel that leaves the supplied target invariant.
pub trait MoveKernel: Sync {
    /// Called once per step with the weighted ensemble, before any move.
    fn adapt(&mut self, _states: &[Vec<f64>], _weights: &WeightVector) {}
    fn apply(&self, x: Vec<f64>, log_target: &(dyn Fn(&[f64]) -> f64 + Sync), rng: &mut StreamRng) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityKernel;

impl MoveKernel for IdentityKernel {
    fn apply(&self, x: Vec<f64>, _log_target: &(dyn Fn(&[f64]) -> f64 + Sync), _rng: &mut StreamRng) -> Vec<f64> {
        x
    }
}

/// Applies `first` then `second` with one RNG stream.
#[derive(Debug, Clone)]
pub struct Composed<A, B>(pub A, pub B);

impl<A: MoveKernel, B: MoveKernel> MoveKernel for Composed<A, B> {
    fn adapt(&mut self, states: &[Vec<f64>], weights: &WeightVector) {
        self.0.adapt(states, weights);
        self.1.adapt(states, weights);
    }

    fn apply(&self, x: Vec<f64>, log_target: &(dyn Fn(&[f64]) -> f64 + Sync), rng: &mut StreamRng) -> Vec<f64> {
        let x = self.0.apply(x, log_target, rng);
        self.1.apply(x, log_target, rng)
    }
}

/// Random-walk Metropolis with a fixed Gaussian increment.
#[derive(Debug, Clone)]
pub struct RandomWalkMetropolis {
    increment: GaussianNoise,
}

impl RandomWalkMetropolis {
    pub fn new(proposal_cov: DMatrix<f64>) -> Result<Self> {
        Ok(RandomWalkMetropolis { increment: GaussianNoise::new(proposal_cov)? })
    }

    pub fn proposal_cov(&self) -> &DMatrix<f64> {
        self.increment.cov()
    }
}

impl MoveKernel for RandomWalkMetropolis {
    fn apply(&self, x: Vec<f64>, log_target: &(dyn Fn(&[f64]) -> f64 + Sync), rng: &mut StreamRng) -> Vec<f64> {
        let current = DVector::from_vec(x);
        let proposal = self.increment.sample(&current, rng);
        let log_ratio = log_target(proposal.as_slice()) - log_target(current.as_slice());
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            proposal.data.into()
        } else {
            current.data.into()
        }
    }
}

/// Random-walk Metropolis whose increment covariance is
/// `(scale^2 / d) * Sigma`, with `Sigma` the weighted ensemble covariance
/// recomputed at every step. The default scale is 2.38.
#[derive(Debug, Clone)]
pub struct AdaptiveRandomWalk {
    scale: f64,
    inner: Option<RandomWalkMetropolis>,
}

impl Default for AdaptiveRandomWalk {
    fn default() -> Self {
        AdaptiveRandomWalk { scale: 2.38, inner: None }
    }
}

impl AdaptiveRandomWalk {
    pub fn with_scale(scale: f64) -> Self {
        AdaptiveRandomWalk { scale, inner: None }
    }

    pub fn current(&self) -> Option<&RandomWalkMetropolis> {
        self.inner.as_ref()
    }
}

impl MoveKernel for AdaptiveRandomWalk {
    fn adapt(&mut self, states: &[Vec<f64>], weights: &WeightVector) {
        let (_, cov) = weighted_moments(states, weights);
        let d = cov.nrows();
        let scaled = cov * (self.scale * self.scale / d as f64);
        let kernel = RandomWalkMetropolis::new(scaled.clone()).unwrap_or_else(|_| {
            // Rounding can leave a nearly singular covariance slightly
            // indefinite; fall back to its diagonal.
            let diag = DMatrix::from_diagonal(&scaled.diagonal().map(|v| v.max(0.0)));
            RandomWalkMetropolis::new(diag).expect("diagonal is PSD")
        });
        self.inner = Some(kernel);
    }

    fn apply(&self, x: Vec<f64>, log_target: &(dyn Fn(&[f64]) -> f64 + Sync), rng: &mut StreamRng) -> Vec<f64> {
        match &self.inner {
            Some(k) => k.apply(x, log_target, rng),
            None => x,
        }
    }
}

/// Weighted mean and covariance `sum_i W_i (x_i - m)(x_i - m)'`.
pub fn weighted_moments(states: &[Vec<f64>], weights: &WeightVector) -> (DVector<f64>, DMatrix<f64>) {
    let d = states.first().map_or(0, Vec::len);
    let probs = weights.probabilities();
    let mut mean = DVector::zeros(d);
    for (x, w) in states.iter().zip(&probs) {
        for j in 0..d {
            mean[j] += w * x[j];
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, w) in states.iter().zip(&probs) {
        for a in 0..d {
            for b in 0..=a {
                cov[(a, b)] += w * (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

/// Multiplies the weights by `pi_n / pi_{n-1}` and renormalizes. Returns
/// `log sum_i W_i w_i`, the step's contribution to `log Z`.
pub fn temper_reweight<S: TargetSequence + ?Sized>(
    ens: &mut ParticleEnsemble<Vec<f64>>,
    seq: &S,
    n: usize,
) -> Result<f64> {
    let increments = par_map(ens.len(), |i| seq.log_increment(n, &ens.states[i]));
    let log_w: Vec<f64> = ens.weights.log_weights().iter().zip(&increments).map(|(w, inc)| w + inc).collect();
    let mass = log_sum_exp(&log_w);
    let mut weights = WeightVector::from_log(log_w)
        .map_err(|_| SmcError::Numerical { step: n, message: "NaN incremental weight".into() })?;
    weights.normalize().ok_or(SmcError::TemperingDegenerate { phi: seq.progress(n) })?;
    ens.weights = weights;
    ens.step = n;
    Ok(mass)
}

/// Applies `kernel` `repeats` times to every particle, targeting `pi_n`.
/// Particle `i` draws from `seeder.child(i)`.
pub fn move_ensemble<S: TargetSequence + ?Sized, K: MoveKernel + ?Sized>(
    ens: &mut ParticleEnsemble<Vec<f64>>,
    seq: &S,
    n: usize,
    kernel: &K,
    repeats: usize,
    seeder: Seeder,
) {
    if repeats == 0 {
        return;
    }
    let log_target = |x: &[f64]| seq.log_target(n, x);
    let states = std::mem::take(&mut ens.states);
    let moved = par_map(states.len(), |i| {
        let mut rng = seeder.child(i as u64).rng();
        let mut x = states[i].clone();
        for _ in 0..repeats {
            x = kernel.apply(x, &log_target, &mut rng);
        }
        x
    });
    ens.states = moved;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcSamplerConfig {
    pub n_particles: usize,
    pub moves_per_step: usize,
    pub resample: ResampleConfig,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerStep {
    pub step: usize,
    pub progress: f64,
    pub log_increment: f64,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcSamplerOutput {
    pub ensemble: ParticleEnsemble<Vec<f64>>,
    /// Estimate of `log(Z_T / Z_0)`.
    pub log_evidence: f64,
    pub steps: Vec<SamplerStep>,
}

/// Runs reweight, ESS-gated resample and move for `n = 1..=T`.
///
/// Streams: initial particle `i` uses `seeder.named("init").child(i)`; step
/// `n` resamples from `seeder.child(n).named("resample")` and moves particle
/// `i` with `seeder.child(n).named("move").child(i)`.
pub fn run_smc_sampler<S: TargetSequence + ?Sized, K: MoveKernel + ?Sized>(
    seq: &S,
    kernel: &mut K,
    cfg: &SmcSamplerConfig,
    seeder: Seeder,
) -> Result<SmcSamplerOutput> {
    if cfg.n_particles == 0 {
        return Err(SmcError::InvalidInput("n_particles must be positive".into()));
    }
    let init = seeder.named("init");
    let states = par_map(cfg.n_particles, |i| seq.sample_initial(&mut init.child(i as u64).rng()));
    let mut ens = ParticleEnsemble::uniform(states)?;
    let mut log_evidence = 0.0;
    let mut steps = Vec::with_capacity(seq.steps());
    for n in 1..=seq.steps() {
        let step_seeder = seeder.child(n as u64);
        let log_increment = temper_reweight(&mut ens, seq, n)?;
        log_evidence += log_increment;
        let ess = ens.ess();
        let resample = match cfg.resample.ess_threshold {
            Some(thr) => should_resample(&ens.weights, thr)?,
            None => true,
        };
        if resample {
            let counts = cfg.resample.scheme.resample(&ens.weights, cfg.n_particles, &mut step_seeder.named("resample").rng())?;
            let states = counts.ancestors().into_iter().map(|a| ens.states[a].clone()).collect();
            ens = ParticleEnsemble::new(states, WeightVector::uniform(cfg.n_particles), n)?;
        }
        if cfg.moves_per_step > 0 {
            kernel.adapt(&ens.states, &ens.weights);
            move_ensemble(&mut ens, seq, n, kernel, cfg.moves_per_step, step_seeder.named("move"));
        }
        steps.push(SamplerStep { step: n, progress: seq.progress(n), log_increment, ess, resampled: resample });
    }
    Ok(SmcSamplerOutput { ensemble: ens, log_evidence, steps })
}
