//! State-space models: the abstraction every algorithm consumes, plus the
//! reference models used throughout the tests.
//!
//! A model bundles an initial law, a Markov transition and an observation
//! density. All densities are returned in log space. The reference measure
//! for the transition density is Lebesgue for continuous states and
//! counting measure for finite state spaces.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::gaussian::{normal_log_density, GaussianNoise};
use crate::rng::Seeder;

/// One observation vector `y_n`.
pub type Observation = Vec<f64>;

/// A hidden Markov process observed through conditionally independent noisy
/// measurements.
///
/// Implementations are immutable and shared across threads; every sampling
/// method receives the caller's generator.
pub trait StateSpaceModel: Send + Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    /// Dimension of the feature vector written by [`write_features`](Self::write_features).
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;
    fn sample_transition<R: Rng + ?Sized>(&self, x: &Self::State, rng: &mut R) -> Self::State;

    /// Whether [`transition_log_density`](Self::transition_log_density) is
    /// available. Deterministic or degenerate dynamics report `false`.
    fn has_transition_density(&self) -> bool {
        false
    }

    /// `log p(x_next | x)`, or `None` when the transition has no density.
    fn transition_log_density(&self, _x: &Self::State, _x_next: &Self::State) -> Option<f64> {
        None
    }

    /// `log g(y | x)`; finite or `-inf`, never NaN.
    fn obs_log_density(&self, x: &Self::State, y: &[f64]) -> f64;

    fn sample_observation<R: Rng + ?Sized>(&self, x: &Self::State, rng: &mut R) -> Observation;

    /// Numeric summary of a state (the state itself for vector states, a
    /// one-hot indicator for finite ones), used for weighted means.
    fn write_features(&self, x: &Self::State, out: &mut [f64]);
}

/// Draws a state path of length `steps + 1` and observations `y_1..y_steps`.
pub fn simulate<M: StateSpaceModel>(
    model: &M,
    steps: usize,
    seeder: Seeder,
) -> (Vec<M::State>, Vec<Observation>) {
    let mut rng = seeder.rng();
    let mut states = Vec::with_capacity(steps + 1);
    let mut obs = Vec::with_capacity(steps);
    states.push(model.sample_initial(&mut rng));
    for _ in 0..steps {
        let next = model.sample_transition(states.last().expect("non-empty"), &mut rng);
        obs.push(model.sample_observation(&next, &mut rng));
        states.push(next);
    }
    (states, obs)
}

fn mat_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(SmcError::Dimension(format!("{name} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `X_n | X_{n-1} ~ N(F X_{n-1}, V)`, `Y_n | X_n ~ N(H X_n, R)`, `X_0 ~ N(m0, P0)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianSsm {
    transition: DMatrix<f64>,
    obs_matrix: DMatrix<f64>,
    init_mean: DVector<f64>,
    state_noise: GaussianNoise,
    obs_noise: GaussianNoise,
    init_noise: GaussianNoise,
}

impl LinearGaussianSsm {
    pub fn new(
        transition: DMatrix<f64>,
        state_cov: DMatrix<f64>,
        obs_matrix: DMatrix<f64>,
        obs_cov: DMatrix<f64>,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = transition.nrows();
        let p = obs_matrix.nrows();
        if !transition.is_square()
            || state_cov.shape() != (d, d)
            || obs_matrix.ncols() != d
            || obs_cov.shape() != (p, p)
            || init_mean.len() != d
            || init_cov.shape() != (d, d)
        {
            return Err(SmcError::Dimension(format!(
                "linear-Gaussian model: F {:?}, V {:?}, H {:?}, R {:?}, m0 {}, P0 {:?} are not conformable",
                transition.shape(),
                state_cov.shape(),
                obs_matrix.shape(),
                obs_cov.shape(),
                init_mean.len(),
                init_cov.shape()
            )));
        }
        let obs_noise = GaussianNoise::new(obs_cov)?;
        if !obs_noise.has_density() {
            return Err(SmcError::InvalidInput("observation covariance R must be positive definite".into()));
        }
        Ok(LinearGaussianSsm {
            transition,
            obs_matrix,
            init_mean,
            state_noise: GaussianNoise::new(state_cov)?,
            obs_noise,
            init_noise: GaussianNoise::new(init_cov)?,
        })
    }

    /// Scalar model with the given coefficients and variances.
    pub fn scalar(f: f64, v: f64, h: f64, r: f64, m0: f64, p0: f64) -> Result<Self> {
        let s = |x| DMatrix::from_element(1, 1, x);
        Self::new(s(f), s(v), s(h), s(r), DVector::from_element(1, m0), s(p0))
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.transition
    }
    pub fn state_cov(&self) -> &DMatrix<f64> {
        self.state_noise.cov()
    }
    pub fn obs_matrix(&self) -> &DMatrix<f64> {
        &self.obs_matrix
    }
    pub fn obs_cov(&self) -> &DMatrix<f64> {
        self.obs_noise.cov()
    }
    pub fn init_mean(&self) -> &DVector<f64> {
        &self.init_mean
    }
    pub fn init_cov(&self) -> &DMatrix<f64> {
        self.init_noise.cov()
    }

    /// Same model with a different transition matrix.
    pub fn with_transition(&self, transition: DMatrix<f64>) -> Result<Self> {
        Self::new(
            transition,
            self.state_cov().clone(),
            self.obs_matrix.clone(),
            self.obs_cov().clone(),
            self.init_mean.clone(),
            self.init_cov().clone(),
        )
    }

    pub fn to_spec(&self) -> LinearGaussianSpec {
        LinearGaussianSpec {
            transition: mat_to_rows(&self.transition),
            state_cov: mat_to_rows(self.state_cov()),
            obs_matrix: mat_to_rows(&self.obs_matrix),
            obs_cov: mat_to_rows(self.obs_cov()),
            init_mean: self.init_mean.iter().copied().collect(),
            init_cov: mat_to_rows(self.init_cov()),
        }
    }
}

fn mat_vec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..x.len()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

impl StateSpaceModel for LinearGaussianSsm {
    type State = DVector<f64>;

    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.obs_matrix.nrows()
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.init_noise.sample(&self.init_mean, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        self.state_noise.sample(&(&self.transition * x), rng)
    }

    fn has_transition_density(&self) -> bool {
        self.state_noise.has_density()
    }

    fn transition_log_density(&self, x: &DVector<f64>, x_next: &DVector<f64>) -> Option<f64> {
        let d = x.len();
        if d <= 8 {
            let mut mean = [0.0; 8];
            mat_vec_into(&self.transition, x.as_slice(), &mut mean[..d]);
            self.state_noise.log_density(x_next.as_slice(), &mean[..d])
        } else {
            let mean = &self.transition * x;
            self.state_noise.log_density(x_next.as_slice(), mean.as_slice())
        }
    }

    fn obs_log_density(&self, x: &DVector<f64>, y: &[f64]) -> f64 {
        let p = y.len();
        let density = if p <= 8 {
            let mut mean = [0.0; 8];
            mat_vec_into(&self.obs_matrix, x.as_slice(), &mut mean[..p]);
            self.obs_noise.log_density(y, &mean[..p])
        } else {
            let mean = &self.obs_matrix * x;
            self.obs_noise.log_density(y, mean.as_slice())
        };
        density.expect("R is positive definite by construction")
    }

    fn sample_observation<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Observation {
        self.obs_noise.sample(&(&self.obs_matrix * x), rng).iter().copied().collect()
    }

    fn write_features(&self, x: &DVector<f64>, out: &mut [f64]) {
        out.copy_from_slice(x.as_slice());
    }
}

/// Emission law of a finite hidden Markov model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Emission {
    /// `y | k ~ N(means[k], sds[k]^2)`, scalar observations.
    Gaussian { means: Vec<f64>, sds: Vec<f64> },
    /// `P(y = j | k) = probs[k][j]`; the observation carries the symbol index.
    Discrete { probs: Vec<Vec<f64>> },
}

impl Emission {
    fn num_states(&self) -> usize {
        match self {
            Emission::Gaussian { means, .. } => means.len(),
            Emission::Discrete { probs } => probs.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Emission::Gaussian { means, sds } => {
                if means.len() != sds.len() || sds.iter().any(|s| !(*s > 0.0)) {
                    return Err(SmcError::InvalidInput(
                        "gaussian emission needs one positive sd per mean".into(),
                    ));
                }
            }
            Emission::Discrete { probs } => {
                for (k, row) in probs.iter().enumerate() {
                    check_distribution(row, &format!("emission row {k}"))?;
                }
            }
        }
        Ok(())
    }

    pub fn log_density(&self, k: usize, y: &[f64]) -> f64 {
        match self {
            Emission::Gaussian { means, sds } => normal_log_density(y[0], means[k], sds[k]),
            Emission::Discrete { probs } => {
                let sym = y[0];
                if sym >= 0.0 && sym.fract() == 0.0 && (sym as usize) < probs[k].len() {
                    probs[k][sym as usize].ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> f64 {
        match self {
            Emission::Gaussian { means, sds } => means[k] + sds[k] * rng.sample::<f64, _>(StandardNormal),
            Emission::Discrete { probs } => sample_categorical(&probs[k], rng) as f64,
        }
    }
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(SmcError::InvalidInput(format!("{name} must be non-empty and non-negative")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(SmcError::InvalidInput(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u = 1.0 - rng.random::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
        }
        acc += pi;
        if u <= acc && pi > 0.0 {
            return i;
        }
    }
    last_positive
}

/// Finite-state hidden Markov model with states `0..K`.
#[derive(Debug, Clone)]
pub struct FiniteHmm {
    init_probs: Vec<f64>,
    trans: Vec<Vec<f64>>,
    log_trans: Vec<Vec<f64>>,
    emission: Emission,
}

impl FiniteHmm {
    pub fn new(init_probs: Vec<f64>, trans: Vec<Vec<f64>>, emission: Emission) -> Result<Self> {
        let k = init_probs.len();
        check_distribution(&init_probs, "init_probs")?;
        if trans.len() != k || trans.iter().any(|r| r.len() != k) {
            return Err(SmcError::Dimension(format!("transition matrix must be {k}x{k}")));
        }
        for (i, row) in trans.iter().enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        if emission.num_states() != k {
            return Err(SmcError::Dimension(format!("emission must describe {k} states")));
        }
        emission.validate()?;
        let log_trans = trans.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Ok(FiniteHmm { init_probs, trans, log_trans, emission })
    }

    pub fn num_states(&self) -> usize {
        self.init_probs.len()
    }
    pub fn init_probs(&self) -> &[f64] {
        &self.init_probs
    }
    pub fn trans(&self) -> &[Vec<f64>] {
        &self.trans
    }
    pub fn emission(&self) -> &Emission {
        &self.emission
    }
    pub fn emission_log_density(&self, k: usize, y: &[f64]) -> f64 {
        self.emission.log_density(k, y)
    }
}

impl StateSpaceModel for FiniteHmm {
    type State = usize;

    fn state_dim(&self) -> usize {
        self.num_states()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.init_probs, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, x: &usize, rng: &mut R) -> usize {
        sample_categorical(&self.trans[*x], rng)
    }

    fn has_transition_density(&self) -> bool {
        true
    }

    fn transition_log_density(&self, x: &usize, x_next: &usize) -> Option<f64> {
        Some(self.log_trans[*x][*x_next])
    }

    fn obs_log_density(&self, x: &usize, y: &[f64]) -> f64 {
        self.emission.log_density(*x, y)
    }

    fn sample_observation<R: Rng + ?Sized>(&self, x: &usize, rng: &mut R) -> Observation {
        vec![self.emission.sample(*x, rng)]
    }

    fn write_features(&self, x: &usize, out: &mut [f64]) {
        out.fill(0.0);
        out[*x] = 1.0;
    }
}

/// Scalar nonlinear benchmark:
/// `x' = a x + b x / (1 + x^2) + N(0, v)`, `y = x^2 / c + N(0, r)`, `x_0 ~ N(0, p0)`.
/// Demo plumbing only; there is no exact solution to compare against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticGrowth {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub state_var: f64,
    pub obs_var: f64,
    pub init_var: f64,
}

impl Default for StochasticGrowth {
    fn default() -> Self {
        StochasticGrowth { a: 0.5, b: 25.0, c: 20.0, state_var: 10.0, obs_var: 1.0, init_var: 5.0 }
    }
}

impl StochasticGrowth {
    fn drift(&self, x: f64) -> f64 {
        self.a * x + self.b * x / (1.0 + x * x)
    }
}

impl StateSpaceModel for StochasticGrowth {
    type State = f64;

    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.init_var.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, x: &f64, rng: &mut R) -> f64 {
        self.drift(*x) + self.state_var.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }

    fn has_transition_density(&self) -> bool {
        self.state_var > 0.0
    }

    fn transition_log_density(&self, x: &f64, x_next: &f64) -> Option<f64> {
        self.has_transition_density()
            .then(|| normal_log_density(*x_next, self.drift(*x), self.state_var.sqrt()))
    }

    fn obs_log_density(&self, x: &f64, y: &[f64]) -> f64 {
        normal_log_density(y[0], x * x / self.c, self.obs_var.sqrt())
    }

    fn sample_observation<R: Rng + ?Sized>(&self, x: &f64, rng: &mut R) -> Observation {
        vec![x * x / self.c + self.obs_var.sqrt() * rng.sample::<f64, _>(StandardNormal)]
    }

    fn write_features(&self, x: &f64, out: &mut [f64]) {
        out[0] = *x;
    }
}

/// A family of models indexed by a real parameter vector, with a prior.
pub trait ParametricSsm: Send + Sync {
    type Model: StateSpaceModel;

    fn param_dim(&self) -> usize;

    /// `log p(theta)`; `-inf` outside the prior's support.
    fn log_prior(&self, theta: &[f64]) -> f64;

    /// Model at `theta`. Must succeed wherever the prior is positive.
    fn build(&self, theta: &[f64]) -> Result<Self::Model>;
}

/// Linear-Gaussian model whose (scalar) transition coefficient is unknown,
/// with a uniform prior on `(lower, upper)`.
#[derive(Debug, Clone)]
pub struct UnknownTransitionCoefficient {
    pub base: LinearGaussianSsm,
    pub lower: f64,
    pub upper: f64,
}

impl UnknownTransitionCoefficient {
    pub fn new(base: LinearGaussianSsm, lower: f64, upper: f64) -> Result<Self> {
        if base.state_dim() != 1 {
            return Err(SmcError::Dimension("unknown-coefficient family needs a scalar state".into()));
        }
        if !(lower < upper) {
            return Err(SmcError::InvalidInput("prior support must satisfy lower < upper".into()));
        }
        Ok(UnknownTransitionCoefficient { base, lower, upper })
    }
}

impl ParametricSsm for UnknownTransitionCoefficient {
    type Model = LinearGaussianSsm;

    fn param_dim(&self) -> usize {
        1
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if theta[0] > self.lower && theta[0] < self.upper {
            -(self.upper - self.lower).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn build(&self, theta: &[f64]) -> Result<LinearGaussianSsm> {
        self.base.with_transition(DMatrix::from_element(1, 1, theta[0]))
    }
}

/// Serializable description of a linear-Gaussian model; matrices are
/// nested row arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianSpec {
    pub transition: Vec<Vec<f64>>,
    pub state_cov: Vec<Vec<f64>>,
    pub obs_matrix: Vec<Vec<f64>>,
    pub obs_cov: Vec<Vec<f64>>,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<Vec<f64>>,
}

impl LinearGaussianSpec {
    pub fn build(&self) -> Result<LinearGaussianSsm> {
        LinearGaussianSsm::new(
            mat_from_rows(&self.transition, "transition")?,
            mat_from_rows(&self.state_cov, "state_cov")?,
            mat_from_rows(&self.obs_matrix, "obs_matrix")?,
            mat_from_rows(&self.obs_cov, "obs_cov")?,
            DVector::from_vec(self.init_mean.clone()),
            mat_from_rows(&self.init_cov, "init_cov")?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteHmmSpec {
    pub init_probs: Vec<f64>,
    pub trans_matrix: Vec<Vec<f64>>,
    pub emission: Emission,
}

impl FiniteHmmSpec {
    pub fn build(&self) -> Result<FiniteHmm> {
        FiniteHmm::new(self.init_probs.clone(), self.trans_matrix.clone(), self.emission.clone())
    }
}

/// Model section of a configuration file, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    LinearGaussian(LinearGaussianSpec),
    FiniteHmm(FiniteHmmSpec),
    StochasticGrowth(StochasticGrowth),
}
