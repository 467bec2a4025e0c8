//! Ensemble Kalman filter with perturbed observations.
//!
//! Members are propagated through the model and then shifted by a Kalman
//! update whose gain uses the sample covariance of the forecast ensemble:
//! `X_i = X*_i + K (y - H X*_i + eps_i)`, `eps_i ~ N(0, R)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::filter::par_map;
use crate::gaussian::{check_symmetric_psd, symmetrize, GaussianNoise};
use crate::model::{LinearGaussianSsm, Observation, StateSpaceModel};
use crate::rng::Seeder;

/// Covariance regularization applied to the forecast sample covariance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularization {
    #[default]
    None,
    /// `P <- (1 - lambda) P + lambda diag(P)`.
    Shrinkage { lambda: f64 },
    /// Element-wise product with the Gaspari-Cohn correlation of the index
    /// distance `|i - j|`; correlations vanish beyond `radius`.
    Taper { radius: f64 },
}

/// Gaspari-Cohn fifth-order piecewise rational correlation, support `[0, 2c]`.
fn gaspari_cohn(dist: f64, c: f64) -> f64 {
    let z = dist / c;
    if z <= 1.0 {
        -0.25 * z.powi(5) + 0.5 * z.powi(4) + 0.625 * z.powi(3) - 5.0 / 3.0 * z * z + 1.0
    } else if z < 2.0 {
        z.powi(5) / 12.0 - 0.5 * z.powi(4) + 0.625 * z.powi(3) + 5.0 / 3.0 * z * z - 5.0 * z + 4.0
            - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

impl Regularization {
    pub fn apply(&self, cov: &mut DMatrix<f64>) {
        match *self {
            Regularization::None => {}
            Regularization::Shrinkage { lambda } => {
                let diag = DMatrix::from_diagonal(&cov.diagonal());
                *cov = &*cov * (1.0 - lambda) + diag * lambda;
            }
            Regularization::Taper { radius } => {
                let c = radius / 2.0;
                let d = cov.nrows();
                for i in 0..d {
                    for j in 0..d {
                        cov[(i, j)] *= gaspari_cohn(i.abs_diff(j) as f64, c);
                    }
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Regularization::Shrinkage { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(SmcError::InvalidInput(format!("shrinkage lambda {lambda} outside [0, 1]")))
            }
            Regularization::Taper { radius } if !(radius > 0.0) => {
                Err(SmcError::InvalidInput(format!("taper radius {radius} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Linear-Gaussian observation operator and covariance regularization.
#[derive(Debug, Clone)]
pub struct EnkfConfig {
    obs_matrix: DMatrix<f64>,
    obs_noise: GaussianNoise,
    pub regularization: Regularization,
}

impl EnkfConfig {
    pub fn new(obs_matrix: DMatrix<f64>, obs_cov: DMatrix<f64>, regularization: Regularization) -> Result<Self> {
        check_symmetric_psd(&obs_cov, "R")?;
        if obs_cov.nrows() != obs_matrix.nrows() {
            return Err(SmcError::Dimension("R must have as many rows as H".into()));
        }
        let obs_noise = GaussianNoise::new(obs_cov)?;
        if !obs_noise.has_density() {
            return Err(SmcError::InvalidInput("R must be positive definite".into()));
        }
        regularization.validate()?;
        Ok(EnkfConfig { obs_matrix, obs_noise, regularization })
    }

    /// Observation operator taken from a linear-Gaussian model.
    pub fn from_model(model: &LinearGaussianSsm, regularization: Regularization) -> Result<Self> {
        Self::new(model.obs_matrix().clone(), model.obs_cov().clone(), regularization)
    }

    pub fn obs_matrix(&self) -> &DMatrix<f64> {
        &self.obs_matrix
    }

    pub fn obs_cov(&self) -> &DMatrix<f64> {
        self.obs_noise.cov()
    }
}

/// Equally weighted ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkfEnsemble {
    pub states: Vec<DVector<f64>>,
    pub step: usize,
}

impl EnkfEnsemble {
    pub fn new(states: Vec<DVector<f64>>, step: usize) -> Result<Self> {
        if states.len() < 2 {
            return Err(SmcError::InvalidInput("ensemble Kalman filter needs at least 2 members".into()));
        }
        Ok(EnkfEnsemble { states, step })
    }

    pub fn from_prior<M>(model: &M, n: usize, seeder: Seeder) -> Result<Self>
    where
        M: StateSpaceModel<State = DVector<f64>>,
    {
        Self::new(par_map(n, |i| model.sample_initial(&mut seeder.child(i as u64).rng())), 0)
    }

    /// Sample mean and `1/(N-1)` sample covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        sample_moments(&self.states)
    }
}

pub fn sample_moments(states: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = states.len();
    let d = states[0].len();
    let mut mean = DVector::zeros(d);
    for x in states {
        mean += x;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in states {
        let c = x - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Analysis step on a forecast ensemble. Member `i` draws its observation
/// perturbation from `seeder.child(i)`.
pub fn enkf_analysis(
    forecast: &[DVector<f64>],
    y: &[f64],
    cfg: &EnkfConfig,
    step: usize,
    seeder: Seeder,
) -> Result<Vec<DVector<f64>>> {
    let h = &cfg.obs_matrix;
    if y.len() != h.nrows() {
        return Err(SmcError::Dimension(format!("observation length {} != {}", y.len(), h.nrows())));
    }
    let (_, mut cov) = sample_moments(forecast);
    cfg.regularization.apply(&mut cov);
    let hp = h * &cov;
    let mut s = &hp * h.transpose() + cfg.obs_cov();
    symmetrize(&mut s);
    if !s.iter().all(|v| v.is_finite()) {
        return Err(SmcError::Numerical { step, message: "non-finite forecast covariance".into() });
    }
    let chol = s.cholesky().ok_or_else(|| SmcError::Numerical {
        step,
        message: "H P H' + R is not positive definite".into(),
    })?;
    // K = P H' S^{-1}, from S K' = H P.
    let gain = chol.solve(&hp).transpose();
    let y = DVector::from_column_slice(y);
    let zero = DVector::zeros(y.len());
    Ok(par_map(forecast.len(), |i| {
        let eps = cfg.obs_noise.sample(&zero, &mut seeder.child(i as u64).rng());
        let x = &forecast[i];
        x + &gain * (&y - h * x + eps)
    }))
}

/// Propagate every member through the model, then apply the analysis.
pub fn enkf_step<M>(
    ens: &EnkfEnsemble,
    y: &[f64],
    model: &M,
    cfg: &EnkfConfig,
    seeder: Seeder,
) -> Result<EnkfEnsemble>
where
    M: StateSpaceModel<State = DVector<f64>>,
{
    let propagate = seeder.named("propagate");
    let forecast: Vec<DVector<f64>> = par_map(ens.states.len(), |i| {
        model.sample_transition(&ens.states[i], &mut propagate.child(i as u64).rng())
    });
    let step = ens.step + 1;
    let states = enkf_analysis(&forecast, y, cfg, step, seeder.named("analysis"))?;
    Ok(EnkfEnsemble { states, step })
}

/// Per-step ensemble moments from [`run_enkf`].
#[derive(Debug, Clone)]
pub struct EnkfTrace {
    /// Moments after the analysis at steps `1..T`.
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// Ensembles for `n = 0..T` when requested.
    pub ensembles: Option<Vec<EnkfEnsemble>>,
}

pub fn run_enkf<M>(
    model: &M,
    ys: &[Observation],
    n_members: usize,
    cfg: &EnkfConfig,
    store_ensembles: bool,
    seeder: Seeder,
) -> Result<EnkfTrace>
where
    M: StateSpaceModel<State = DVector<f64>>,
{
    let mut ens = EnkfEnsemble::from_prior(model, n_members, seeder.named("init"))?;
    let mut means = Vec::with_capacity(ys.len());
    let mut covs = Vec::with_capacity(ys.len());
    let mut stored = store_ensembles.then(|| vec![ens.clone()]);
    for (i, y) in ys.iter().enumerate() {
        ens = enkf_step(&ens, y, model, cfg, seeder.child(i as u64 + 1))?;
        let (m, c) = ens.moments();
        means.push(m);
        covs.push(c);
        if let Some(s) = stored.as_mut() {
            s.push(ens.clone());
        }
    }
    Ok(EnkfTrace { means, covs, ensembles: stored })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_states(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| DVector::from_element(1, *x)).collect()
    }

    #[test]
    fn zero_observation_matrix_is_identity_update() {
        let cfg = EnkfConfig::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), Regularization::None).unwrap();
        let forecast = scalar_states(&[0.1, -2.0, 3.5, 0.7]);
        let out = enkf_analysis(&forecast, &[5.0], &cfg, 1, Seeder::new(0)).unwrap();
        assert_eq!(out, forecast);
    }

    #[test]
    fn scalar_gain_example() {
        // Members -1, 0, 1 have sample variance 1; with H = R = 1 the gain is 0.5.
        let forecast = scalar_states(&[-1.0, 0.0, 1.0]);
        let cfg = EnkfConfig::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), Regularization::None).unwrap();
        let out = enkf_analysis(&forecast, &[2.0], &cfg, 1, Seeder::new(3)).unwrap();
        // Member at 0 maps to 0 + 0.5 (2 - 0 + eps); recover eps from the same stream.
        let eps = cfg.obs_noise.sample(&DVector::zeros(1), &mut Seeder::new(3).child(1).rng())[0];
        assert!((out[1][0] - 0.5 * (2.0 + eps)).abs() < 1e-12);
        assert!((out[1][0] - 0.5 * eps - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shrinkage_and_taper() {
        let mut p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 4.0]);
        Regularization::Shrinkage { lambda: 0.5 }.apply(&mut p);
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 4.0]));

        let mut q = DMatrix::from_element(4, 4, 1.0);
        Regularization::Taper { radius: 2.0 }.apply(&mut q);
        for i in 0..4 {
            assert!((q[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((q[(i, j)] - q[(j, i)]).abs() < 1e-15);
                if i.abs_diff(j) >= 2 {
                    assert!(q[(i, j)].abs() < 1e-12);
                }
            }
        }
        assert!(q[(0, 1)] > 0.0 && q[(0, 1)] < 1.0);
        assert!(Regularization::Shrinkage { lambda: 1.5 }.validate().is_err());
    }

    #[test]
    fn needs_two_members() {
        assert!(EnkfEnsemble::new(scalar_states(&[1.0]), 0).is_err());
    }

    #[test]
    fn affine_equivariance() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.5]);
        let b = DVector::from_vec(vec![1.0, -4.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let r = DMatrix::from_element(1, 1, 0.7);
        let mut rng = Seeder::new(7).rng();
        let noise = GaussianNoise::new(DMatrix::identity(2, 2)).unwrap();
        let forecast: Vec<DVector<f64>> = (0..50).map(|_| noise.sample(&DVector::zeros(2), &mut rng)).collect();
        let y = [0.8];

        let cfg = EnkfConfig::new(h.clone(), r.clone(), Regularization::None).unwrap();
        let out = enkf_analysis(&forecast, &y, &cfg, 1, Seeder::new(1)).unwrap();

        let a_inv = a.clone().try_inverse().unwrap();
        let h2 = &h * &a_inv;
        let y2 = [y[0] + (&h2 * &b)[0]];
        let mapped: Vec<DVector<f64>> = forecast.iter().map(|x| &a * x + &b).collect();
        let cfg2 = EnkfConfig::new(h2, r, Regularization::None).unwrap();
        let out2 = enkf_analysis(&mapped, &y2, &cfg2, 1, Seeder::new(1)).unwrap();
        for (x, x2) in out.iter().zip(&out2) {
            assert!((&a * x + &b - x2).amax() < 1e-9);
        }
    }
}
