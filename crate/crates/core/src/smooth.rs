//! Marginal particle smoother.
//!
//! Keeps the filter particles at every step and recomputes their weights
//! backwards from `W_{T|T} = W_T`:
//!
//! ```text
//! W_{n|T}^i = sum_k W_{n+1|T}^k  W_n^i p(X_{n+1}^k | X_n^i) / sum_j W_n^j p(X_{n+1}^k | X_n^j)
//! ```
//!
//! Everything is evaluated in log space. Each backward step costs `O(N^2)`
//! transition density evaluations: one pass for the denominators (one per
//! `k`), one for the new weights (one per `i`).

use log::debug;

use crate::error::{Result, SmcError};
use crate::filter::{par_map, weighted_mean_with, FilterTrace};
use crate::model::StateSpaceModel;
use crate::resample::{LogSumExp, WeightVector};

/// Drift of `sum(W)` from 1 above which a renormalization is logged.
const DRIFT_TOLERANCE: f64 = 1e-10;

/// Smoothing weights `W_{n|T}` on the stored filter particles, `n = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingWeights {
    pub weights: Vec<WeightVector>,
}

impl SmoothingWeights {
    /// Weighted means of the state features under `pi_{n|T}`.
    pub fn means<M: StateSpaceModel>(&self, trace: &FilterTrace<M::State>, model: &M) -> Vec<Vec<f64>> {
        let ensembles = trace.ensembles.as_ref().expect("smoothing weights come from a stored trace");
        ensembles
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| weighted_mean_with(model, &e.states, w.log_weights()))
            .collect()
    }
}

pub fn backward_smooth<M: StateSpaceModel>(
    trace: &FilterTrace<M::State>,
    model: &M,
) -> Result<SmoothingWeights> {
    if !model.has_transition_density() {
        return Err(SmcError::MissingTransitionDensity { algorithm: "backward smoothing" });
    }
    let ensembles = trace.ensembles.as_ref().ok_or_else(|| {
        SmcError::InvalidInput("backward smoothing needs a trace with stored ensembles".into())
    })?;
    let t = ensembles.len() - 1;
    let log_p = |from: &M::State, to: &M::State| {
        model.transition_log_density(from, to).expect("density checked above")
    };

    let mut smoothed = vec![ensembles[t].weights.clone(); t + 1];
    for n in (0..t).rev() {
        let cur = &ensembles[n];
        let next = &ensembles[n + 1];
        let next_smooth = smoothed[n + 1].log_weights();
        let cur_lw = cur.weights.log_weights();

        // log sum_j W_n^j p(X_{n+1}^k | X_n^j), for every k.
        let log_denoms: Vec<f64> = par_map(next.len(), |k| {
            if next_smooth[k] == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut acc = LogSumExp::default();
            for (x, lw) in cur.states.iter().zip(cur_lw) {
                if *lw > f64::NEG_INFINITY {
                    acc.add(lw + log_p(x, &next.states[k]));
                }
            }
            acc.value()
        });

        let mut coef = Vec::with_capacity(next.len());
        for (k, (&ls, &ld)) in next_smooth.iter().zip(&log_denoms).enumerate() {
            if ls == f64::NEG_INFINITY {
                continue;
            }
            if ld == f64::NEG_INFINITY {
                return Err(SmcError::DegenerateBridge { step: n, particle: k });
            }
            coef.push((k, ls - ld));
        }

        let log_w: Vec<f64> = par_map(cur.len(), |i| {
            if cur_lw[i] == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut acc = LogSumExp::default();
            for &(k, c) in &coef {
                acc.add(c + log_p(&cur.states[i], &next.states[k]));
            }
            cur_lw[i] + acc.value()
        });

        let mut w = WeightVector::from_log(log_w)
            .map_err(|_| SmcError::Numerical { step: n, message: "NaN smoothing weight".into() })?;
        let total = w.normalize().ok_or(SmcError::DegenerateBridge { step: n, particle: 0 })?;
        if total.abs() > DRIFT_TOLERANCE {
            debug!("smoothing weights at step {n} drifted by {total:e} in log mass; renormalized");
        }
        smoothed[n] = w;
    }
    Ok(SmoothingWeights { weights: smoothed })
}
