//! Exact filtering and smoothing for the two model classes where the
//! recursions close: the Kalman filter with Rauch-Tung-Striebel smoother for
//! linear-Gaussian models, and the forward-backward algorithm for finite
//! state spaces. The Monte Carlo methods are validated against these.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::gaussian::{mvn_log_density, symmetrize};
use crate::model::{FiniteHmm, LinearGaussianSsm, Observation};
use crate::resample::log_sum_exp;

/// Gaussian distribution `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianBelief { mean, cov }
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        GaussianBelief::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    fn debug_check(&self) {
        debug_assert!(
            (&self.cov - self.cov.transpose()).amax() <= 1e-10 * self.cov.amax().max(1.0),
            "covariance lost symmetry"
        );
    }
}

/// Propagation: `(F m, F P F' + V)`.
pub fn kalman_predict(b: &GaussianBelief, f: &DMatrix<f64>, v: &DMatrix<f64>) -> GaussianBelief {
    let mut cov = f * &b.cov * f.transpose() + v;
    symmetrize(&mut cov);
    GaussianBelief::new(f * &b.mean, cov)
}

/// Bayes update with a linear-Gaussian observation. Returns the posterior
/// and `log N(y; H m, H P H' + R)`, the exact one-step predictive
/// log-likelihood.
///
/// The covariance uses the Joseph form `(I-KH) P (I-KH)' + K R K'`, which
/// equals `P - K H P` in exact arithmetic and stays PSD under round-off.
pub fn kalman_update(
    b: &GaussianBelief,
    y: &[f64],
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(GaussianBelief, f64)> {
    update_at(b, y, h, r, 0)
}

fn update_at(
    b: &GaussianBelief,
    y: &[f64],
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    step: usize,
) -> Result<(GaussianBelief, f64)> {
    if y.len() != h.nrows() {
        return Err(SmcError::Dimension(format!(
            "observation has length {}, H has {} rows",
            y.len(),
            h.nrows()
        )));
    }
    let y = DVector::from_column_slice(y);
    let pred_y = h * &b.mean;
    let hp = h * &b.cov;
    let mut s = &hp * h.transpose() + r;
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or_else(|| SmcError::Numerical {
        step,
        message: "innovation covariance H P H' + R is not positive definite".into(),
    })?;
    let gain = chol.solve(&hp).transpose();
    let log_evidence = mvn_log_density(&y, &pred_y, &s).expect("S factorized above");
    let mean = &b.mean + &gain * (&y - &pred_y);
    let n = b.mean.len();
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let mut cov = &i_kh * &b.cov * i_kh.transpose() + &gain * r * gain.transpose();
    symmetrize(&mut cov);
    let post = GaussianBelief::new(mean, cov);
    post.debug_check();
    Ok((post, log_evidence))
}

/// Output of a Kalman filter pass over `y_1..y_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanOutput {
    /// Predicted beliefs `pi_{n|n-1}` for `n = 1..T` (index `n - 1`).
    pub predicted: Vec<GaussianBelief>,
    /// Filtered beliefs `pi_n` for `n = 0..T`; entry 0 is the initial law.
    pub filtered: Vec<GaussianBelief>,
    /// `log p(y_n | y_{1:n-1})` for `n = 1..T`.
    pub log_lik_increments: Vec<f64>,
}

impl KalmanOutput {
    pub fn log_likelihood(&self) -> f64 {
        self.log_lik_increments.iter().sum()
    }
}

pub fn kalman_filter(model: &LinearGaussianSsm, ys: &[Observation]) -> Result<KalmanOutput> {
    let mut filtered = vec![GaussianBelief::new(model.init_mean().clone(), model.init_cov().clone())];
    let mut predicted = Vec::with_capacity(ys.len());
    let mut incs = Vec::with_capacity(ys.len());
    for (i, y) in ys.iter().enumerate() {
        let pred = kalman_predict(filtered.last().expect("non-empty"), model.transition_matrix(), model.state_cov());
        let (post, inc) = update_at(&pred, y, model.obs_matrix(), model.obs_cov(), i + 1)?;
        predicted.push(pred);
        filtered.push(post);
        incs.push(inc);
    }
    Ok(KalmanOutput { predicted, filtered, log_lik_increments: incs })
}

/// Rauch-Tung-Striebel backward pass: exact marginals `pi_{n|T}`, `n = 0..T`.
///
/// A singular predicted covariance falls back to the pseudo-inverse.
pub fn kalman_smoother(transition: &DMatrix<f64>, out: &KalmanOutput) -> Vec<GaussianBelief> {
    let t = out.predicted.len();
    let mut smoothed = vec![out.filtered[t].clone(); t + 1];
    for n in (0..t).rev() {
        let filt = &out.filtered[n];
        let pred = &out.predicted[n];
        let cross = &filt.cov * transition.transpose();
        // J = P_n F' P_{n+1|n}^{-1}, via a solve against the symmetric P_{n+1|n}.
        let j = match pred.cov.clone().cholesky() {
            Some(ch) => ch.solve(&cross.transpose()).transpose(),
            None => {
                warn!("singular predicted covariance at step {}; using pseudo-inverse", n + 1);
                let pinv = pred.cov.clone().pseudo_inverse(1e-12).expect("eps is non-negative");
                &cross * pinv
            }
        };
        let next = &smoothed[n + 1];
        let mean = &filt.mean + &j * (&next.mean - &pred.mean);
        let mut cov = &filt.cov + &j * (&next.cov - &pred.cov) * j.transpose();
        symmetrize(&mut cov);
        smoothed[n] = GaussianBelief::new(mean, cov);
    }
    smoothed
}

/// Probability vector over the states of a finite model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBelief {
    pub probs: Vec<f64>,
}

impl DiscreteBelief {
    fn from_log_unnormalized(lp: &[f64]) -> Self {
        let total = log_sum_exp(lp);
        DiscreteBelief { probs: lp.iter().map(|v| (v - total).exp()).collect() }
    }

    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self.probs.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Result of the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmForward {
    /// Filter distributions for `n = 0..T`; entry 0 is the initial law.
    pub filtered: Vec<DiscreteBelief>,
    pub log_lik_increments: Vec<f64>,
    pub log_likelihood: f64,
}

/// Forward recursion in log space.
pub fn hmm_forward(model: &FiniteHmm, ys: &[Observation]) -> Result<HmmForward> {
    let k = model.num_states();
    let log_trans: Vec<Vec<f64>> =
        model.trans().iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    let mut log_alpha: Vec<f64> = model.init_probs().iter().map(|p| p.ln()).collect();
    let mut filtered = vec![DiscreteBelief { probs: model.init_probs().to_vec() }];
    let mut incs = Vec::with_capacity(ys.len());
    let mut terms = vec![0.0; k];
    for (i, y) in ys.iter().enumerate() {
        let mut next = vec![0.0; k];
        for (to, slot) in next.iter_mut().enumerate() {
            for (from, t) in terms.iter_mut().enumerate() {
                *t = log_alpha[from] + log_trans[from][to];
            }
            *slot = log_sum_exp(&terms) + model.emission_log_density(to, y);
        }
        let inc = log_sum_exp(&next);
        if inc == f64::NEG_INFINITY {
            return Err(SmcError::DegenerateModel { step: i + 1 });
        }
        next.iter_mut().for_each(|v| *v -= inc);
        filtered.push(DiscreteBelief::from_log_unnormalized(&next));
        incs.push(inc);
        log_alpha = next;
    }
    let log_likelihood = incs.iter().sum();
    Ok(HmmForward { filtered, log_lik_increments: incs, log_likelihood })
}

/// Smoothed marginals `pi_{n|T}` for `n = 0..T`.
pub fn hmm_backward_smooth(model: &FiniteHmm, ys: &[Observation]) -> Result<Vec<DiscreteBelief>> {
    let fwd = hmm_forward(model, ys)?;
    let k = model.num_states();
    let t = ys.len();
    let log_trans: Vec<Vec<f64>> =
        model.trans().iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    let mut log_beta = vec![0.0; k];
    let mut smoothed = vec![fwd.filtered[t].clone(); t + 1];
    let mut terms = vec![0.0; k];
    for n in (0..t).rev() {
        let y = &ys[n];
        let emit: Vec<f64> = (0..k).map(|j| model.emission_log_density(j, y)).collect();
        let mut next = vec![0.0; k];
        for (from, slot) in next.iter_mut().enumerate() {
            for (to, term) in terms.iter_mut().enumerate() {
                *term = log_trans[from][to] + emit[to] + log_beta[to];
            }
            *slot = log_sum_exp(&terms);
        }
        let scale = log_sum_exp(&next);
        next.iter_mut().for_each(|v| *v -= scale);
        log_beta = next;
        let joint: Vec<f64> =
            fwd.filtered[n].probs.iter().zip(&log_beta).map(|(p, b)| p.ln() + b).collect();
        smoothed[n] = DiscreteBelief::from_log_unnormalized(&joint);
    }
    Ok(smoothed)
}
