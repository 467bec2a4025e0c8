//! Experiment configuration (TOML) and its validation.
//!
//! Every table rejects unknown keys. Fields that a subcommand needs are
//! optional at parse time and checked afterwards so that the error names the
//! missing field.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use smc_core::enkf::Regularization;
use smc_core::filter::ResampleConfig;
use smc_core::model::{
    Emission, FiniteHmm, LinearGaussianSsm, ModelSpec, StochasticGrowth,
};
use smc_core::rare_event::RandomWalkChain;
use smc_core::resample::{ResamplingScheme, DEFAULT_ESS_THRESHOLD};
use smc_core::smc_sampler::{validate_schedule, uniform_schedule, DensitySpec, DiagGaussianMixture};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: Option<ModelSpec>,
    pub model_name: Option<String>,
    /// Observation CSV, relative to the config file.
    pub observations: Option<PathBuf>,
    /// Simulate this many observations from the model instead of reading them.
    pub simulate_steps: Option<usize>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub enkf: EnkfSection,
    #[serde(default)]
    pub smooth: SmoothSection,
    #[serde(default)]
    pub pmmh: PmmhSection,
    #[serde(default)]
    pub smc: SmcSection,
    #[serde(default)]
    pub rare_event: RareEventSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterAlgorithm {
    #[default]
    Sir,
    Apf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub n_particles: Option<usize>,
    #[serde(default)]
    pub algorithm: FilterAlgorithm,
    pub scheme: Option<ResamplingScheme>,
    pub ess_threshold: Option<f64>,
    pub always_resample: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnkfSection {
    pub n_members: Option<usize>,
    #[serde(default)]
    pub regularization: Regularization,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothSection {
    pub n_particles: Option<usize>,
    pub scheme: Option<ResamplingScheme>,
    pub ess_threshold: Option<f64>,
    pub always_resample: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmmhSection {
    pub n_particles: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub proposal_scale: Option<f64>,
    pub init: Option<f64>,
    pub prior_lower: Option<f64>,
    pub prior_upper: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcSection {
    pub n_particles: Option<usize>,
    pub steps: Option<usize>,
    pub schedule: Option<Vec<f64>>,
    pub moves_per_step: Option<usize>,
    pub proposal_scale: Option<f64>,
    pub base: Option<DensitySpec>,
    pub target: Option<DensitySpec>,
    pub scheme: Option<ResamplingScheme>,
    pub ess_threshold: Option<f64>,
    pub always_resample: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RareEventSection {
    pub n_particles: Option<usize>,
    pub replications: Option<usize>,
    pub chain: Option<RandomWalkChain>,
}

/// Built model, one variant per supported family.
#[derive(Debug, Clone)]
pub enum Model {
    LinearGaussian(LinearGaussianSsm),
    FiniteHmm(FiniteHmm),
    StochasticGrowth(StochasticGrowth),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::LinearGaussian(_) => "linear_gaussian",
            Model::FiniteHmm(_) => "finite_hmm",
            Model::StochasticGrowth(_) => "stochastic_growth",
        }
    }
}

/// Names accepted by `model_name`.
pub const MODEL_REGISTRY: [&str; 3] = ["scalar_linear_gaussian", "three_state_hmm", "stochastic_growth"];

fn registry_model(name: &str) -> Option<Model> {
    match name {
        "scalar_linear_gaussian" => Some(Model::LinearGaussian(
            LinearGaussianSsm::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).expect("valid constants"),
        )),
        "three_state_hmm" => Some(Model::FiniteHmm(
            FiniteHmm::new(
                vec![1.0 / 3.0; 3],
                vec![vec![0.8, 0.15, 0.05], vec![0.1, 0.8, 0.1], vec![0.05, 0.15, 0.8]],
                Emission::Gaussian { means: vec![-2.0, 0.0, 2.0], sds: vec![1.0, 1.0, 1.0] },
            )
            .expect("valid constants"),
        )),
        "stochastic_growth" => Some(Model::StochasticGrowth(StochasticGrowth::default())),
        _ => None,
    }
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| {
        let at = e.span().map_or(String::new(), |span| {
            format!(" (line {})", text[..span.start].matches('\n').count() + 1)
        });
        CliError::Validation(format!("config{at}: {}", e.message()))
    })
}

fn required<T: Clone>(v: &Option<T>, field: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Validation(format!("{field} is required")))
}

fn positive(v: usize, field: &str) -> Result<usize, CliError> {
    if v == 0 {
        return Err(CliError::Validation(format!("{field} must be at least 1")));
    }
    Ok(v)
}

fn required_count(v: Option<usize>, field: &str) -> Result<usize, CliError> {
    positive(required(&v, field)?, field)
}

fn resample_config(
    section: &str,
    scheme: Option<ResamplingScheme>,
    ess_threshold: Option<f64>,
    always: Option<bool>,
) -> Result<ResampleConfig, CliError> {
    let scheme = scheme.unwrap_or_default();
    if always.unwrap_or(false) {
        if ess_threshold.is_some() {
            return Err(CliError::Validation(format!(
                "{section}.ess_threshold conflicts with {section}.always_resample = true"
            )));
        }
        return Ok(ResampleConfig::always(scheme));
    }
    let t = ess_threshold.unwrap_or(DEFAULT_ESS_THRESHOLD);
    if !(t > 0.0 && t <= 1.0) {
        return Err(CliError::Validation(format!("{section}.ess_threshold must lie in (0, 1], got {t}")));
    }
    Ok(ResampleConfig { scheme, ess_threshold: Some(t) })
}

impl ExperimentConfig {
    /// Seed from the flag, else from the config.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        flag.or(self.seed)
            .ok_or_else(|| CliError::Validation("seed is required (set `seed` in the config or pass --seed)".into()))
    }

    pub fn build_model(&self) -> Result<Model, CliError> {
        match (&self.model, &self.model_name) {
            (Some(_), Some(_)) => Err(CliError::Validation("model and model_name are mutually exclusive".into())),
            (None, None) => Err(CliError::Validation("model is required (a [model] table or model_name)".into())),
            (None, Some(name)) => registry_model(name).ok_or_else(|| {
                CliError::Validation(format!("model_name: unknown model {name:?}, expected one of {MODEL_REGISTRY:?}"))
            }),
            (Some(spec), None) => {
                let invalid = |e: smc_core::SmcError| CliError::Validation(format!("model: {e}"));
                Ok(match spec {
                    ModelSpec::LinearGaussian(s) => Model::LinearGaussian(s.build().map_err(invalid)?),
                    ModelSpec::FiniteHmm(s) => Model::FiniteHmm(s.build().map_err(invalid)?),
                    ModelSpec::StochasticGrowth(g) => {
                        let ok = [g.state_var, g.obs_var, g.init_var].iter().all(|v| *v > 0.0) && g.c != 0.0;
                        if !ok {
                            return Err(CliError::Validation(
                                "model: stochastic_growth needs positive variances and nonzero c".into(),
                            ));
                        }
                        Model::StochasticGrowth(*g)
                    }
                })
            }
        }
    }

    /// Where observations come from: a CSV path (resolved against
    /// `config_dir`) or a simulation length.
    pub fn data_source(&self, config_dir: &Path) -> Result<DataSource, CliError> {
        match (&self.observations, self.simulate_steps) {
            (Some(_), Some(_)) => {
                Err(CliError::Validation("observations and simulate_steps are mutually exclusive".into()))
            }
            (None, None) => Err(CliError::Validation(
                "observations is required (a CSV path or simulate_steps)".into(),
            )),
            (Some(p), None) => Ok(DataSource::Csv(config_dir.join(p))),
            (None, Some(t)) => Ok(DataSource::Simulate(positive(t, "simulate_steps")?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Simulate(usize),
}

pub struct FilterParams {
    pub n_particles: usize,
    pub algorithm: FilterAlgorithm,
    pub resample: ResampleConfig,
}

impl FilterSection {
    pub fn validate(&self) -> Result<FilterParams, CliError> {
        Ok(FilterParams {
            n_particles: required_count(self.n_particles, "filter.n_particles")?,
            algorithm: self.algorithm,
            resample: resample_config("filter", self.scheme, self.ess_threshold, self.always_resample)?,
        })
    }
}

pub struct EnkfParams {
    pub n_members: usize,
    pub regularization: Regularization,
}

impl EnkfSection {
    pub fn validate(&self) -> Result<EnkfParams, CliError> {
        let n_members = required_count(self.n_members, "enkf.n_members")?;
        if n_members < 2 {
            return Err(CliError::Validation("enkf.n_members must be at least 2".into()));
        }
        match self.regularization {
            Regularization::Shrinkage { lambda } if !(0.0..=1.0).contains(&lambda) => {
                return Err(CliError::Validation(format!("enkf.regularization.lambda must lie in [0, 1], got {lambda}")));
            }
            Regularization::Taper { radius } if !(radius > 0.0) => {
                return Err(CliError::Validation(format!("enkf.regularization.radius must be positive, got {radius}")));
            }
            _ => {}
        }
        Ok(EnkfParams { n_members, regularization: self.regularization })
    }
}

pub struct SmoothParams {
    pub n_particles: usize,
    pub resample: ResampleConfig,
}

impl SmoothSection {
    pub fn validate(&self) -> Result<SmoothParams, CliError> {
        Ok(SmoothParams {
            n_particles: required_count(self.n_particles, "smooth.n_particles")?,
            resample: resample_config("smooth", self.scheme, self.ess_threshold, self.always_resample)?,
        })
    }
}

pub struct PmmhParams {
    pub n_particles: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub proposal_scale: f64,
    pub init: f64,
    pub prior_lower: f64,
    pub prior_upper: f64,
}

impl PmmhSection {
    pub fn validate(&self) -> Result<PmmhParams, CliError> {
        let n_particles = required_count(self.n_particles, "pmmh.n_particles")?;
        let iterations = required_count(self.iterations, "pmmh.iterations")?;
        let proposal_scale = required(&self.proposal_scale, "pmmh.proposal_scale")?;
        if !(proposal_scale > 0.0 && proposal_scale.is_finite()) {
            return Err(CliError::Validation("pmmh.proposal_scale must be positive".into()));
        }
        let prior_lower = required(&self.prior_lower, "pmmh.prior_lower")?;
        let prior_upper = required(&self.prior_upper, "pmmh.prior_upper")?;
        if !(prior_lower < prior_upper) || !prior_lower.is_finite() || !prior_upper.is_finite() {
            return Err(CliError::Validation("pmmh.prior_lower must be below pmmh.prior_upper".into()));
        }
        let init = self.init.unwrap_or(0.5 * (prior_lower + prior_upper));
        if !(init > prior_lower && init < prior_upper) {
            return Err(CliError::Validation(format!(
                "pmmh.init = {init} lies outside the prior support ({prior_lower}, {prior_upper})"
            )));
        }
        Ok(PmmhParams {
            n_particles,
            iterations,
            burn_in: self.burn_in.unwrap_or(0),
            proposal_scale,
            init,
            prior_lower,
            prior_upper,
        })
    }
}

pub struct SmcParams {
    pub n_particles: usize,
    pub schedule: Vec<f64>,
    pub moves_per_step: usize,
    pub proposal_scale: f64,
    pub base: DiagGaussianMixture,
    pub target: DiagGaussianMixture,
    pub resample: ResampleConfig,
}

impl SmcSection {
    pub fn validate(&self) -> Result<SmcParams, CliError> {
        let n_particles = required_count(self.n_particles, "smc.n_particles")?;
        let schedule = match (self.steps, &self.schedule) {
            (Some(_), Some(_)) => {
                return Err(CliError::Validation("smc.steps and smc.schedule are mutually exclusive".into()))
            }
            (None, None) => return Err(CliError::Validation("smc.steps is required (or smc.schedule)".into())),
            (Some(s), None) => uniform_schedule(positive(s, "smc.steps")?),
            (None, Some(s)) => {
                validate_schedule(s).map_err(|e| CliError::Validation(format!("smc.schedule: {e}")))?;
                s.clone()
            }
        };
        let base = required(&self.base, "smc.base")?
            .build()
            .map_err(|e| CliError::Validation(format!("smc.base: {e}")))?;
        let target = required(&self.target, "smc.target")?
            .build()
            .map_err(|e| CliError::Validation(format!("smc.target: {e}")))?;
        use smc_core::smc_sampler::LogDensity;
        if base.dim() != target.dim() {
            return Err(CliError::Validation(format!(
                "smc.target has dimension {}, smc.base has {}",
                target.dim(),
                base.dim()
            )));
        }
        let proposal_scale = self.proposal_scale.unwrap_or(2.38);
        if !(proposal_scale > 0.0 && proposal_scale.is_finite()) {
            return Err(CliError::Validation("smc.proposal_scale must be positive".into()));
        }
        Ok(SmcParams {
            n_particles,
            schedule,
            moves_per_step: self.moves_per_step.unwrap_or(1),
            proposal_scale,
            base,
            target,
            resample: resample_config("smc", self.scheme, self.ess_threshold, self.always_resample)?,
        })
    }
}

pub struct RareEventParams {
    pub n_particles: usize,
    pub replications: usize,
    pub chain: RandomWalkChain,
}

impl RareEventSection {
    pub fn validate(&self) -> Result<RareEventParams, CliError> {
        let n_particles = required_count(self.n_particles, "rare_event.n_particles")?;
        let replications = positive(self.replications.unwrap_or(1), "rare_event.replications")?;
        let chain = required(&self.chain, "rare_event.chain")?;
        chain.validate().map_err(|e| CliError::Validation(format!("rare_event.chain: {e}")))?;
        Ok(RareEventParams { n_particles, replications, chain })
    }
}
