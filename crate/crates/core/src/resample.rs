//! Importance weights, effective sample size and resampling schemes.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};

/// Tolerance on `|sum(exp(log_weights)) - 1|` for a vector to count as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-10;

/// Default ESS fraction below which resampling is triggered.
pub const DEFAULT_ESS_THRESHOLD: f64 = 0.5;

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Streaming log-sum-exp accumulator; avoids materializing the terms.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        LogSumExp { max: f64::NEG_INFINITY, sum: 0.0 }
    }
}

impl LogSumExp {
    pub fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Particle weights held in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    log_weights: Vec<f64>,
    normalized: bool,
}

impl WeightVector {
    /// Equal weights `1/n`.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "weight vector needs at least one entry");
        let lw = -(n as f64).ln();
        WeightVector { log_weights: vec![lw; n], normalized: true }
    }

    /// Unnormalized log weights. Rejects empty input and NaN entries.
    pub fn from_log(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(SmcError::InvalidInput("empty weight vector".into()));
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(SmcError::InvalidInput("NaN log weight".into()));
        }
        let normalized = Self::sums_to_one(&log_weights);
        Ok(WeightVector { log_weights, normalized })
    }

    /// Linear-scale weights; they must be non-negative.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(SmcError::InvalidInput("weights must be non-negative".into()));
        }
        Self::from_log(probs.iter().map(|p| p.ln()).collect())
    }

    fn sums_to_one(log_weights: &[f64]) -> bool {
        let total: f64 = log_weights.iter().map(|w| w.exp()).sum();
        (total - 1.0).abs() <= NORMALIZATION_TOLERANCE
    }

    /// Normalizes in place and returns the log of the previous total.
    /// All-zero weights are left untouched and reported as `None`.
    pub fn normalize(&mut self) -> Option<f64> {
        let total = log_sum_exp(&self.log_weights);
        if !total.is_finite() {
            return None;
        }
        for w in &mut self.log_weights {
            *w -= total;
        }
        self.normalized = true;
        Some(total)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(SmcError::NotNormalized)
        }
    }

    /// Cumulative weights with every entry from the last positive weight on
    /// pinned to exactly 1, so the top interval always closes the unit range.
    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut cum: Vec<f64> = self
            .log_weights
            .iter()
            .map(|w| {
                acc += w.exp();
                acc
            })
            .collect();
        if let Some(last) = self.log_weights.iter().rposition(|w| *w > f64::NEG_INFINITY) {
            for c in &mut cum[last..] {
                *c = 1.0;
            }
        }
        cum
    }
}

/// Offspring counts, one per input particle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleCounts(pub Vec<usize>);

impl ResampleCounts {
    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Parent index of each offspring, in increasing order.
    pub fn ancestors(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (i, &c) in self.0.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, c));
        }
        out
    }
}

/// Effective sample size `1 / sum(W_i^2)`.
pub fn ess(w: &WeightVector) -> Result<f64> {
    w.require_normalized()?;
    let sum_sq: f64 = w.log_weights.iter().map(|lw| (2.0 * lw).exp()).sum();
    Ok(1.0 / sum_sq)
}

/// True iff `ess(w) < threshold_fraction * N`.
pub fn should_resample(w: &WeightVector, threshold_fraction: f64) -> Result<bool> {
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(SmcError::InvalidInput(format!(
            "ESS threshold fraction must lie in (0, 1], got {threshold_fraction}"
        )));
    }
    Ok(ess(w)? < threshold_fraction * w.len() as f64)
}

/// Balanced (systematic) resampling: particle `i` receives one offspring for
/// every grid point `(u + k) / m`, `k = 0..m`, falling in
/// `(c_{i-1}, c_i]`, where `c` are the cumulative weights.
pub fn systematic_resample(w: &WeightVector, m: usize, u: f64) -> Result<ResampleCounts> {
    w.require_normalized()?;
    if m == 0 {
        return Err(SmcError::InvalidInput("output size must be at least 1".into()));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(SmcError::InvalidInput(format!("uniform draw must lie in (0, 1), got {u}")));
    }
    let cum = w.cumulative();
    let mut counts = vec![0usize; w.len()];
    let mut i = 0;
    for k in 0..m {
        let point = (u + k as f64) / m as f64;
        while point > cum[i] {
            i += 1;
        }
        counts[i] += 1;
    }
    Ok(ResampleCounts(counts))
}

/// `m` independent categorical draws with probabilities `W_i`.
pub fn multinomial_resample<R: Rng + ?Sized>(
    w: &WeightVector,
    m: usize,
    rng: &mut R,
) -> Result<ResampleCounts> {
    w.require_normalized()?;
    let cum = w.cumulative();
    let mut counts = vec![0usize; w.len()];
    for _ in 0..m {
        // u in (0, 1]; the first c_i >= u has a non-empty interval.
        let u = 1.0 - rng.random::<f64>();
        let i = cum.partition_point(|&c| c < u);
        counts[i] += 1;
    }
    Ok(ResampleCounts(counts))
}

/// Resampling scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    #[default]
    Systematic,
    Multinomial,
}

impl ResamplingScheme {
    pub fn resample<R: Rng + ?Sized>(
        &self,
        w: &WeightVector,
        m: usize,
        rng: &mut R,
    ) -> Result<ResampleCounts> {
        match self {
            ResamplingScheme::Systematic => {
                let u: f64 = rng.sample(Open01);
                systematic_resample(w, m, u)
            }
            ResamplingScheme::Multinomial => multinomial_resample(w, m, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seeder;
    use proptest::prelude::*;

    fn probs(p: &[f64]) -> WeightVector {
        WeightVector::from_probabilities(p).unwrap()
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&WeightVector::uniform(100)).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(ess(&probs(&[1.0, 0.0, 0.0])).unwrap(), 1.0);
        // 1 / (0.25 + 0.0625 + 0.0625) = 8/3
        assert!((ess(&probs(&[0.5, 0.25, 0.25])).unwrap() - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ess_rejects_unnormalized() {
        let w = WeightVector::from_log(vec![0.0, 0.0]).unwrap();
        assert_eq!(ess(&w), Err(SmcError::NotNormalized));
    }

    #[test]
    fn nan_weights_rejected() {
        assert!(WeightVector::from_log(vec![0.0, f64::NAN]).is_err());
        assert!(WeightVector::from_log(vec![]).is_err());
    }

    #[test]
    fn should_resample_examples() {
        assert!(!should_resample(&WeightVector::uniform(10), 0.5).unwrap());
        assert!(should_resample(&probs(&[1.0, 0.0, 0.0, 0.0]), 0.5).unwrap());
        assert!(should_resample(&probs(&[0.5, 0.25, 0.25]), 0.9).unwrap());
        assert!(should_resample(&WeightVector::uniform(3), 0.0).is_err());
    }

    #[test]
    fn systematic_examples() {
        for u in [0.01, 0.3, 0.5, 0.99] {
            assert_eq!(systematic_resample(&probs(&[0.7, 0.3]), 10, u).unwrap().0, vec![7, 3]);
        }
        assert_eq!(systematic_resample(&probs(&[0.9, 0.1]), 1, 0.95).unwrap().0, vec![0, 1]);
        assert_eq!(systematic_resample(&probs(&[0.5, 0.5]), 2, 0.3).unwrap().0, vec![1, 1]);
    }

    #[test]
    fn systematic_boundary_is_right_closed() {
        // Grid point 0.5 sits on the boundary and belongs to the left interval.
        assert_eq!(systematic_resample(&probs(&[0.5, 0.5]), 1, 0.5).unwrap().0, vec![1, 0]);
    }

    #[test]
    fn systematic_skips_zero_weights() {
        let w = probs(&[0.0, 0.6, 0.0, 0.4, 0.0]);
        for u in [1e-9, 0.5, 1.0 - 1e-12] {
            let c = systematic_resample(&w, 7, u).unwrap();
            assert_eq!(c.0[0] + c.0[2] + c.0[4], 0);
            assert_eq!(c.total(), 7);
        }
    }

    #[test]
    fn multinomial_point_mass() {
        let mut rng = Seeder::new(1).rng();
        let c = multinomial_resample(&probs(&[1.0, 0.0, 0.0]), 25, &mut rng).unwrap();
        assert_eq!(c.0, vec![25, 0, 0]);
    }

    #[test]
    fn multinomial_uniform_frequencies() {
        let mut rng = Seeder::new(2).rng();
        let m = 100_000;
        let c = multinomial_resample(&WeightVector::uniform(4), m, &mut rng).unwrap();
        let se = (0.25 * 0.75 / m as f64).sqrt();
        for &k in c.counts() {
            assert!((k as f64 / m as f64 - 0.25).abs() < 4.0 * se, "{c:?}");
        }
    }

    #[test]
    fn multinomial_single_draw_proportion() {
        let seeder = Seeder::new(3);
        let w = probs(&[0.5, 0.5]);
        let trials = 10_000;
        let mut first = 0;
        for t in 0..trials {
            let c = multinomial_resample(&w, 1, &mut seeder.child(t).rng()).unwrap();
            assert!(c.0 == vec![1, 0] || c.0 == vec![0, 1]);
            first += c.0[0];
        }
        let se = (0.25 / trials as f64).sqrt();
        assert!((first as f64 / trials as f64 - 0.5).abs() < 4.0 * se);
    }

    #[test]
    fn ancestors_expand_counts() {
        assert_eq!(ResampleCounts(vec![2, 0, 1]).ancestors(), vec![0, 0, 2]);
    }

    #[test]
    fn streaming_lse_matches_slice() {
        let xs = [-3.0, 10.0, f64::NEG_INFINITY, 9.5, -700.0];
        let mut acc = LogSumExp::default();
        xs.iter().for_each(|&x| acc.add(x));
        assert!((acc.value() - log_sum_exp(&xs)).abs() < 1e-12);
        assert_eq!(LogSumExp::default().value(), f64::NEG_INFINITY);
    }

    fn weight_vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0f64..10.0], 1..40)
            .prop_filter("needs positive mass", |v| v.iter().any(|&x| x > 0.0))
    }

    proptest! {
        #[test]
        fn systematic_is_balanced(raw in weight_vector(), m in 1usize..100, u in 1e-9f64..(1.0 - 1e-9)) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let mut w = WeightVector::from_probabilities(&p).unwrap();
            w.normalize();
            let c = systematic_resample(&w, m, u).unwrap();
            prop_assert_eq!(c.total(), m);
            for (ci, pi) in c.counts().iter().zip(&p) {
                prop_assert!((*ci as f64 - m as f64 * pi).abs() < 1.0);
                if *pi == 0.0 {
                    prop_assert_eq!(*ci, 0);
                }
            }
        }

        #[test]
        fn multinomial_total_and_support(raw in weight_vector(), m in 1usize..100, seed in any::<u64>()) {
            let mut w = WeightVector::from_probabilities(&raw).unwrap();
            w.normalize();
            let c = multinomial_resample(&w, m, &mut Seeder::new(seed).rng()).unwrap();
            prop_assert_eq!(c.total(), m);
            for (ci, r) in c.counts().iter().zip(&raw) {
                if *r == 0.0 {
                    prop_assert_eq!(*ci, 0);
                }
            }
        }
    }
}
