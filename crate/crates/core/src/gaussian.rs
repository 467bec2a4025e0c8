//! Multivariate normal helpers shared by the models and the exact solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmcError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SYMMETRY_TOLERANCE: f64 = 1e-10;

pub(crate) fn check_symmetric_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(SmcError::Dimension(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOLERANCE * scale {
        return Err(SmcError::InvalidInput(format!("{name} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig < -SYMMETRY_TOLERANCE * scale {
        return Err(SmcError::InvalidInput(format!(
            "{name} is not positive semi-definite (min eigenvalue {min_eig})"
        )));
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Zero-mean Gaussian with a fixed covariance. Sampling works for any PSD
/// covariance; the density exists only when it is positive definite.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    cov: DMatrix<f64>,
    /// Square-root factor used for sampling (`factor * factor' = cov`).
    factor: DMatrix<f64>,
    /// Cholesky factor and `-0.5 * (d ln 2pi + ln det)`, when PD.
    density: Option<(DMatrix<f64>, f64)>,
}

impl GaussianNoise {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        check_symmetric_psd(&cov, "covariance")?;
        let d = cov.nrows();
        let (factor, density) = match cov.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
                (l.clone(), Some((l, log_norm)))
            }
            None => {
                let eig = cov.clone().symmetric_eigen();
                let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                (&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals), None)
            }
        };
        Ok(GaussianNoise { cov, factor, density })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn has_density(&self) -> bool {
        self.density.is_some()
    }

    /// `mean + factor * z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        mean + &self.factor * z
    }

    /// Log density of `x` under `N(mean, cov)`; `None` when the covariance is singular.
    pub fn log_density(&self, x: &[f64], mean: &[f64]) -> Option<f64> {
        let (l, log_norm) = self.density.as_ref()?;
        let d = x.len();
        let mut small = [0.0f64; 8];
        let mut large;
        let z: &mut [f64] = if d <= small.len() {
            &mut small[..d]
        } else {
            large = vec![0.0; d];
            &mut large
        };
        // Forward substitution L z = x - mean.
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = x[i] - mean[i];
            for j in 0..i {
                acc -= l[(i, j)] * z[j];
            }
            z[i] = acc / l[(i, i)];
            quad += z[i] * z[i];
        }
        Some(log_norm - 0.5 * quad)
    }
}

/// Log density of `N(mean, cov)` at `x`, via a fresh Cholesky factorization.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let ch = cov.clone().cholesky()?;
    let diff = x - mean;
    let sol = ch.solve(&diff);
    let log_det: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Some(-0.5 * (x.len() as f64 * LN_2PI + log_det + diff.dot(&sol)))
}

/// Scalar normal log density.
pub fn normal_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (LN_2PI + z * z) - sd.ln()
}
