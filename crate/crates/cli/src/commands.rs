//! Subcommand runners. Each one validates everything it needs, loads its
//! data, computes, and only then writes its artifacts.

use std::path::PathBuf;

use serde::Serialize;
use smc_core::enkf::{run_enkf, EnkfConfig, Regularization};
use smc_core::filter::{
    run_apf, run_filter, FilterConfig, FiniteHmmOptimal, LinearGaussianOptimal, StepSummary,
};
use smc_core::model::{simulate, FiniteHmm, LinearGaussianSsm, StochasticGrowth, UnknownTransitionCoefficient};
use smc_core::oracle::{hmm_backward_smooth, hmm_forward, kalman_filter, kalman_smoother};
use smc_core::pmcmc::{run_pmmh, GaussianRandomWalk, PmmhConfig};
use smc_core::rare_event::{gamblers_ruin_probability, splitting_replicated};
use smc_core::smc_sampler::{run_smc_sampler, weighted_moments, AdaptiveRandomWalk, SmcSamplerConfig, Tempered};
use smc_core::smooth::backward_smooth;
use smc_core::{stats, Observation, Seeder, StateSpaceModel};

use crate::config::{DataSource, ExperimentConfig, FilterAlgorithm, Model};
use crate::error::CliError;
use crate::output::{fmt_f64, indexed, observations_table, read_observations, OutputSet, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Filter,
    Enkf,
    Smooth,
    Pmmh,
    Smc,
    RareEvent,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Filter => "filter",
            Subcommand::Enkf => "enkf",
            Subcommand::Smooth => "smooth",
            Subcommand::Pmmh => "pmmh",
            Subcommand::Smc => "smc",
            Subcommand::RareEvent => "rare-event",
        }
    }
}

pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_dir: PathBuf,
    pub seed: u64,
    pub oracle: bool,
    pub out_dir: PathBuf,
}

impl RunContext {
    fn seeder(&self) -> Seeder {
        Seeder::new(self.seed)
    }

    /// Observations from the configured source; simulated data use the
    /// `data` stream.
    fn observations(&self, model: &Model, source: &DataSource) -> Result<(Vec<Observation>, bool), CliError> {
        let obs_dim = match model {
            Model::LinearGaussian(m) => m.obs_dim(),
            Model::FiniteHmm(m) => m.obs_dim(),
            Model::StochasticGrowth(m) => m.obs_dim(),
        };
        match source {
            DataSource::Csv(path) => Ok((read_observations(path, obs_dim)?, false)),
            DataSource::Simulate(t) => {
                let s = self.seeder().named("data");
                let ys = match model {
                    Model::LinearGaussian(m) => simulate(m, *t, s).1,
                    Model::FiniteHmm(m) => simulate(m, *t, s).1,
                    Model::StochasticGrowth(m) => simulate(m, *t, s).1,
                };
                Ok((ys, true))
            }
        }
    }
}

fn no_oracle(ctx: &RunContext, cmd: Subcommand) -> Result<(), CliError> {
    if ctx.oracle {
        return Err(CliError::Validation(format!("--oracle is not available for {}", cmd.name())));
    }
    Ok(())
}

fn oracle_model(ctx: &RunContext, model: &Model, cmd: Subcommand) -> Result<(), CliError> {
    if ctx.oracle && matches!(model, Model::StochasticGrowth(_)) {
        return Err(CliError::Validation(format!(
            "--oracle: {} has no exact solution for a stochastic_growth model",
            cmd.name()
        )));
    }
    Ok(())
}

fn bool_cell(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

fn f64_cells(xs: &[f64]) -> impl Iterator<Item = String> + '_ {
    xs.iter().map(|v| fmt_f64(*v))
}

pub fn run(cmd: Subcommand, ctx: &RunContext) -> Result<OutputSet, CliError> {
    match cmd {
        Subcommand::Simulate => run_simulate(ctx),
        Subcommand::Filter => run_filter_cmd(ctx),
        Subcommand::Enkf => run_enkf_cmd(ctx),
        Subcommand::Smooth => run_smooth_cmd(ctx),
        Subcommand::Pmmh => run_pmmh_cmd(ctx),
        Subcommand::Smc => run_smc_cmd(ctx),
        Subcommand::RareEvent => run_rare_event_cmd(ctx),
    }
}

/// Row of numbers describing a state in `states.csv`.
trait StateRow: StateSpaceModel {
    fn state_columns(&self) -> usize;
    fn state_values(&self, x: &Self::State) -> Vec<f64>;
}

impl StateRow for LinearGaussianSsm {
    fn state_columns(&self) -> usize {
        self.state_dim()
    }
    fn state_values(&self, x: &Self::State) -> Vec<f64> {
        x.iter().copied().collect()
    }
}

impl StateRow for FiniteHmm {
    fn state_columns(&self) -> usize {
        1
    }
    fn state_values(&self, x: &usize) -> Vec<f64> {
        vec![*x as f64]
    }
}

impl StateRow for StochasticGrowth {
    fn state_columns(&self) -> usize {
        1
    }
    fn state_values(&self, x: &f64) -> Vec<f64> {
        vec![*x]
    }
}

fn states_table<M: StateRow>(model: &M, steps: usize, seeder: Seeder) -> (Table, Vec<Observation>) {
    let (xs, ys) = simulate(model, steps, seeder);
    let mut cols = vec!["step".to_string()];
    cols.extend(indexed("x", model.state_columns()));
    let mut t = Table::new(cols);
    for (n, x) in xs.iter().enumerate() {
        let mut row = vec![n.to_string()];
        row.extend(f64_cells(&model.state_values(x)));
        t.push(row);
    }
    (t, ys)
}

#[derive(Serialize)]
struct SimulateSummary {
    model: &'static str,
    steps: usize,
}

fn run_simulate(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let steps = ctx
        .config
        .simulate
        .steps
        .ok_or_else(|| CliError::Validation("simulate.steps is required".into()))?;
    if steps == 0 {
        return Err(CliError::Validation("simulate.steps must be at least 1".into()));
    }
    no_oracle(ctx, Subcommand::Simulate)?;
    let model = ctx.config.build_model()?;
    let seeder = ctx.seeder().named("data");
    let (states, ys) = match &model {
        Model::LinearGaussian(m) => states_table(m, steps, seeder),
        Model::FiniteHmm(m) => states_table(m, steps, seeder),
        Model::StochasticGrowth(m) => states_table(m, steps, seeder),
    };
    let mut out = OutputSet::create(&ctx.out_dir)?;
    out.csv("states.csv", "states/v1", &states)?;
    out.csv("observations.csv", "observations/v1", &observations_table(&ys))?;
    out.json("simulate_summary.json", "simulate_summary/v1", &SimulateSummary { model: model.kind(), steps })?;
    Ok(out)
}

/// Exact filtering means for steps `1..T` and the exact log-likelihood.
fn exact_filter(model: &Model, ys: &[Observation]) -> Result<(Vec<Vec<f64>>, f64), CliError> {
    match model {
        Model::LinearGaussian(m) => {
            let kf = kalman_filter(m, ys).map_err(CliError::algorithm("oracle"))?;
            let means = kf.filtered[1..].iter().map(|b| b.mean.iter().copied().collect()).collect();
            Ok((means, kf.log_likelihood()))
        }
        Model::FiniteHmm(m) => {
            let fwd = hmm_forward(m, ys).map_err(CliError::algorithm("oracle"))?;
            Ok((fwd.filtered[1..].iter().map(|b| b.probs.clone()).collect(), fwd.log_likelihood))
        }
        Model::StochasticGrowth(_) => unreachable!("rejected during validation"),
    }
}

#[derive(Serialize)]
struct OracleComparison {
    max_abs_mean_error: f64,
    mean_abs_mean_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_likelihood: Option<f64>,
}

/// `step, estimate_j, oracle_j, abs_error_j` with `step` starting at `first_step`.
fn comparison_table(
    estimates: &[Vec<f64>],
    exact: &[Vec<f64>],
    first_step: usize,
    log_likelihood: Option<f64>,
) -> (Table, OracleComparison) {
    let d = estimates.first().map_or(0, Vec::len);
    let mut cols = vec!["step".to_string()];
    cols.extend(indexed("estimate_", d));
    cols.extend(indexed("oracle_", d));
    cols.extend(indexed("abs_error_", d));
    let mut t = Table::new(cols);
    let mut errors = Vec::new();
    for (n, (e, o)) in estimates.iter().zip(exact).enumerate() {
        let err: Vec<f64> = e.iter().zip(o).map(|(a, b)| (a - b).abs()).collect();
        let mut row = vec![(n + first_step).to_string()];
        row.extend(f64_cells(e));
        row.extend(f64_cells(o));
        row.extend(f64_cells(&err));
        t.push(row);
        errors.extend(err);
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    (t, OracleComparison { max_abs_mean_error: max, mean_abs_mean_error: stats::mean(&errors), log_likelihood })
}

#[derive(Serialize)]
struct FilterSummary {
    model: &'static str,
    algorithm: &'static str,
    n_particles: usize,
    steps: usize,
    log_likelihood: f64,
    mean_ess: f64,
    min_ess: f64,
    resample_count: usize,
    simulated_observations: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleComparison>,
}

fn run_filter_cmd(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let params = ctx.config.filter.validate()?;
    let model = ctx.config.build_model()?;
    if params.algorithm == FilterAlgorithm::Apf && matches!(model, Model::StochasticGrowth(_)) {
        return Err(CliError::Validation(
            "filter.algorithm = \"apf\" needs a linear_gaussian or finite_hmm model".into(),
        ));
    }
    oracle_model(ctx, &model, Subcommand::Filter)?;
    let source = ctx.config.data_source(&ctx.config_dir)?;
    let (ys, simulated) = ctx.observations(&model, &source)?;

    let cfg = FilterConfig::new(params.n_particles).with_resample(params.resample);
    let seeder = ctx.seeder().named("filter");
    let steps: Vec<StepSummary> = match (&model, params.algorithm) {
        (Model::LinearGaussian(m), FilterAlgorithm::Sir) => run_filter(m, &ys, &cfg, seeder).map(|t| t.steps),
        (Model::LinearGaussian(m), FilterAlgorithm::Apf) => LinearGaussianOptimal::new(m)
            .and_then(|aux| run_apf(m, &ys, &cfg, &aux, seeder))
            .map(|t| t.steps),
        (Model::FiniteHmm(m), FilterAlgorithm::Sir) => run_filter(m, &ys, &cfg, seeder).map(|t| t.steps),
        (Model::FiniteHmm(m), FilterAlgorithm::Apf) => {
            run_apf(m, &ys, &cfg, &FiniteHmmOptimal::new(m), seeder).map(|t| t.steps)
        }
        (Model::StochasticGrowth(m), _) => run_filter(m, &ys, &cfg, seeder).map(|t| t.steps),
    }
    .map_err(CliError::algorithm("filter"))?;
    let oracle = ctx.oracle.then(|| exact_filter(&model, &ys)).transpose()?;

    let d = steps[0].mean.len();
    let mut cols: Vec<String> = ["step", "ess", "log_lik_increment", "resampled"].map(String::from).into();
    cols.extend(indexed("mean_", d));
    let mut trace = Table::new(cols);
    for s in &steps {
        let mut row = vec![s.step.to_string(), fmt_f64(s.ess), fmt_f64(s.log_lik_increment), bool_cell(s.resampled)];
        row.extend(f64_cells(&s.mean));
        trace.push(row);
    }
    let ess: Vec<f64> = steps.iter().map(|s| s.ess).collect();
    let means: Vec<Vec<f64>> = steps.iter().map(|s| s.mean.clone()).collect();
    let comparison = oracle.map(|(exact, ll)| comparison_table(&means, &exact, 1, Some(ll)));

    let mut out = OutputSet::create(&ctx.out_dir)?;
    if simulated {
        out.csv("observations.csv", "observations/v1", &observations_table(&ys))?;
    }
    out.csv("filter_trace.csv", "filter_trace/v1", &trace)?;
    let summary_oracle = match comparison {
        Some((table, summary)) => {
            out.csv("oracle_comparison.csv", "oracle_comparison/v1", &table)?;
            Some(summary)
        }
        None => None,
    };
    let summary = FilterSummary {
        model: model.kind(),
        algorithm: match params.algorithm {
            FilterAlgorithm::Sir => "sir",
            FilterAlgorithm::Apf => "apf",
        },
        n_particles: params.n_particles,
        steps: steps.len(),
        log_likelihood: steps.iter().map(|s| s.log_lik_increment).sum(),
        mean_ess: stats::mean(&ess),
        min_ess: ess.iter().copied().fold(f64::INFINITY, f64::min),
        resample_count: steps.iter().filter(|s| s.resampled).count(),
        simulated_observations: simulated,
        oracle: summary_oracle,
    };
    out.json("filter_summary.json", "filter_summary/v1", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct EnkfSummary {
    n_members: usize,
    regularization: Regularization,
    steps: usize,
    final_mean: Vec<f64>,
    simulated_observations: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleComparison>,
}

fn run_enkf_cmd(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let params = ctx.config.enkf.validate()?;
    let model = ctx.config.build_model()?;
    let Model::LinearGaussian(m) = &model else {
        return Err(CliError::Validation(format!("model: enkf needs a linear_gaussian model, got {}", model.kind())));
    };
    let source = ctx.config.data_source(&ctx.config_dir)?;
    let (ys, simulated) = ctx.observations(&model, &source)?;

    let err = CliError::algorithm("enkf");
    let cfg = EnkfConfig::from_model(m, params.regularization).map_err(&err)?;
    let tr = run_enkf(m, &ys, params.n_members, &cfg, false, ctx.seeder().named("enkf")).map_err(&err)?;
    let oracle = ctx.oracle.then(|| exact_filter(&model, &ys)).transpose()?;

    let d = m.state_dim();
    let mut cols = vec!["step".to_string()];
    cols.extend(indexed("mean_", d));
    cols.extend(indexed("var_", d));
    let mut trace = Table::new(cols);
    let means: Vec<Vec<f64>> = tr.means.iter().map(|v| v.iter().copied().collect()).collect();
    for (n, (mean, cov)) in means.iter().zip(&tr.covs).enumerate() {
        let mut row = vec![(n + 1).to_string()];
        row.extend(f64_cells(mean));
        row.extend(cov.diagonal().iter().map(|v| fmt_f64(*v)));
        trace.push(row);
    }

    let mut out = OutputSet::create(&ctx.out_dir)?;
    if simulated {
        out.csv("observations.csv", "observations/v1", &observations_table(&ys))?;
    }
    out.csv("enkf_trace.csv", "enkf_trace/v1", &trace)?;
    let summary_oracle = match oracle {
        Some((exact, _)) => {
            let (table, summary) = comparison_table(&means, &exact, 1, None);
            out.csv("oracle_comparison.csv", "oracle_comparison/v1", &table)?;
            Some(summary)
        }
        None => None,
    };
    let summary = EnkfSummary {
        n_members: params.n_members,
        regularization: params.regularization,
        steps: ys.len(),
        final_mean: means.last().cloned().unwrap_or_default(),
        simulated_observations: simulated,
        oracle: summary_oracle,
    };
    out.json("enkf_summary.json", "enkf_summary/v1", &summary)?;
    Ok(out)
}

const SMOOTH_QUANTILES: [(f64, &str); 3] = [(0.05, "q05_"), (0.5, "q50_"), (0.95, "q95_")];

/// Smoothed mean and quantiles of each feature at one step.
type SmoothRow = (Vec<f64>, Vec<[f64; 3]>);

/// Smoothed means and quantiles of every feature, steps `0..T`.
fn smooth_rows<M: StateSpaceModel>(
    model: &M,
    ys: &[Observation],
    cfg: &FilterConfig,
    seeder: Seeder,
) -> Result<Vec<SmoothRow>, CliError> {
    let trace = run_filter(model, ys, cfg, seeder).map_err(CliError::algorithm("smooth: forward filter"))?;
    let sw = backward_smooth(&trace, model).map_err(CliError::algorithm("smooth: backward pass"))?;
    let means = sw.means(&trace, model);
    let d = model.state_dim();
    let ensembles = trace.ensembles.as_ref().expect("stored");
    let mut rows = Vec::with_capacity(means.len());
    let mut buf = vec![0.0; d];
    for ((ens, w), mean) in ensembles.iter().zip(&sw.weights).zip(means) {
        let probs = w.probabilities();
        let mut features = vec![Vec::with_capacity(ens.len()); d];
        for x in &ens.states {
            model.write_features(x, &mut buf);
            for (col, v) in features.iter_mut().zip(&buf) {
                col.push(*v);
            }
        }
        let qs = features
            .iter()
            .map(|col| SMOOTH_QUANTILES.map(|(q, _)| stats::weighted_quantile(col, &probs, q)))
            .collect();
        rows.push((mean, qs));
    }
    Ok(rows)
}

#[derive(Serialize)]
struct SmoothSummary {
    model: &'static str,
    n_particles: usize,
    steps: usize,
    simulated_observations: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleComparison>,
}

fn run_smooth_cmd(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let params = ctx.config.smooth.validate()?;
    let model = ctx.config.build_model()?;
    oracle_model(ctx, &model, Subcommand::Smooth)?;
    let source = ctx.config.data_source(&ctx.config_dir)?;
    let (ys, simulated) = ctx.observations(&model, &source)?;

    let cfg = FilterConfig::new(params.n_particles).with_resample(params.resample).storing();
    let seeder = ctx.seeder().named("smooth");
    let rows = match &model {
        Model::LinearGaussian(m) => smooth_rows(m, &ys, &cfg, seeder),
        Model::FiniteHmm(m) => smooth_rows(m, &ys, &cfg, seeder),
        Model::StochasticGrowth(m) => smooth_rows(m, &ys, &cfg, seeder),
    }?;
    let oracle_err = CliError::algorithm("oracle");
    let exact: Option<Vec<Vec<f64>>> = if ctx.oracle {
        Some(match &model {
            Model::LinearGaussian(m) => {
                let kf = kalman_filter(m, &ys).map_err(&oracle_err)?;
                kalman_smoother(m.transition_matrix(), &kf).iter().map(|b| b.mean.iter().copied().collect()).collect()
            }
            Model::FiniteHmm(m) => {
                hmm_backward_smooth(m, &ys).map_err(&oracle_err)?.into_iter().map(|b| b.probs).collect()
            }
            Model::StochasticGrowth(_) => unreachable!("rejected during validation"),
        })
    } else {
        None
    };

    let d = rows[0].0.len();
    let mut cols = vec!["step".to_string()];
    for j in 1..=d {
        cols.push(format!("mean_{j}"));
        cols.extend(SMOOTH_QUANTILES.iter().map(|(_, p)| format!("{p}{j}")));
    }
    let mut trace = Table::new(cols);
    for (n, (mean, qs)) in rows.iter().enumerate() {
        let mut row = vec![n.to_string()];
        for (m, q) in mean.iter().zip(qs) {
            row.push(fmt_f64(*m));
            row.extend(f64_cells(q));
        }
        trace.push(row);
    }

    let mut out = OutputSet::create(&ctx.out_dir)?;
    if simulated {
        out.csv("observations.csv", "observations/v1", &observations_table(&ys))?;
    }
    out.csv("smooth_trace.csv", "smooth_trace/v1", &trace)?;
    let summary_oracle = match exact {
        Some(exact) => {
            let means: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
            let (table, summary) = comparison_table(&means, &exact, 0, None);
            out.csv("oracle_comparison.csv", "oracle_comparison/v1", &table)?;
            Some(summary)
        }
        None => None,
    };
    let summary = SmoothSummary {
        model: model.kind(),
        n_particles: params.n_particles,
        steps: ys.len(),
        simulated_observations: simulated,
        oracle: summary_oracle,
    };
    out.json("smooth_summary.json", "smooth_summary/v1", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct PmmhSummary {
    n_particles: usize,
    iterations: usize,
    burn_in: usize,
    proposal_scale: f64,
    prior_lower: f64,
    prior_upper: f64,
    acceptance_rate: f64,
    posterior_mean: f64,
    posterior_sd: f64,
    /// Batch-means effective sample size; absent for chains shorter than 100.
    effective_sample_size: Option<f64>,
    simulated_observations: bool,
}

fn run_pmmh_cmd(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let params = ctx.config.pmmh.validate()?;
    no_oracle(ctx, Subcommand::Pmmh)?;
    let model = ctx.config.build_model()?;
    let base = match &model {
        Model::LinearGaussian(m) if m.state_dim() == 1 => m.clone(),
        _ => {
            return Err(CliError::Validation(format!(
                "model: pmmh estimates the transition coefficient of a scalar linear_gaussian model, got {}",
                model.kind()
            )))
        }
    };
    let family = UnknownTransitionCoefficient::new(base, params.prior_lower, params.prior_upper)
        .map_err(|e| CliError::Validation(format!("pmmh: {e}")))?;
    let source = ctx.config.data_source(&ctx.config_dir)?;
    let (ys, simulated) = ctx.observations(&model, &source)?;

    let cfg = PmmhConfig { n_particles: params.n_particles, store_paths: false };
    let q = GaussianRandomWalk { scales: vec![params.proposal_scale] };
    let chain = run_pmmh(
        &family,
        &ys,
        &q,
        vec![params.init],
        params.iterations,
        params.burn_in,
        &cfg,
        ctx.seeder().named("pmmh"),
    )
    .map_err(CliError::algorithm("pmmh"))?;

    let mut table = Table::new(["iteration", "theta_1", "log_likelihood", "accepted"].map(String::from).into());
    for (k, ((theta, ll), acc)) in chain.thetas.iter().zip(&chain.log_likelihoods).zip(&chain.accepted).enumerate() {
        table.push(vec![(k + 1).to_string(), fmt_f64(theta[0]), fmt_f64(*ll), bool_cell(*acc)]);
    }
    let xs = chain.coordinate(0);
    let m = stats::mean(&xs);
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    let summary = PmmhSummary {
        n_particles: params.n_particles,
        iterations: params.iterations,
        burn_in: params.burn_in,
        proposal_scale: params.proposal_scale,
        prior_lower: params.prior_lower,
        prior_upper: params.prior_upper,
        acceptance_rate: chain.acceptance_rate().unwrap_or(0.0),
        posterior_mean: m,
        posterior_sd: sd,
        effective_sample_size: (xs.len() >= 100 && sd > 0.0).then(|| stats::effective_sample_size(&xs, 50)),
        simulated_observations: simulated,
    };

    let mut out = OutputSet::create(&ctx.out_dir)?;
    if simulated {
        out.csv("observations.csv", "observations/v1", &observations_table(&ys))?;
    }
    out.csv("pmmh_chain.csv", "pmmh_chain/v1", &table)?;
    out.json("pmmh_summary.json", "pmmh_summary/v1", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct SmcSummary {
    n_particles: usize,
    steps: usize,
    moves_per_step: usize,
    log_evidence: f64,
    final_mean: Vec<f64>,
    final_sd: Vec<f64>,
    resample_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_log_evidence: Option<f64>,
}

fn run_smc_cmd(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let params = ctx.config.smc.validate()?;
    let exact = ctx.oracle.then(|| params.target.log_normalizer() - params.base.log_normalizer());
    let steps = params.schedule.len() - 1;
    let seq = Tempered::new(params.base, params.target, params.schedule)
        .map_err(|e| CliError::Validation(format!("smc: {e}")))?;
    let cfg = SmcSamplerConfig {
        n_particles: params.n_particles,
        moves_per_step: params.moves_per_step,
        resample: params.resample,
    };
    let mut kernel = AdaptiveRandomWalk::with_scale(params.proposal_scale);
    let res = run_smc_sampler(&seq, &mut kernel, &cfg, ctx.seeder().named("smc")).map_err(CliError::algorithm("smc"))?;

    let mut table =
        Table::new(["step", "progress", "log_increment", "ess", "resampled"].map(String::from).into());
    for s in &res.steps {
        table.push(vec![
            s.step.to_string(),
            fmt_f64(s.progress),
            fmt_f64(s.log_increment),
            fmt_f64(s.ess),
            bool_cell(s.resampled),
        ]);
    }
    let (mean, cov) = weighted_moments(&res.ensemble.states, &res.ensemble.weights);
    let summary = SmcSummary {
        n_particles: params.n_particles,
        steps,
        moves_per_step: params.moves_per_step,
        log_evidence: res.log_evidence,
        final_mean: mean.iter().copied().collect(),
        final_sd: cov.diagonal().iter().map(|v| v.sqrt()).collect(),
        resample_count: res.steps.iter().filter(|s| s.resampled).count(),
        exact_log_evidence: exact,
    };
    let mut out = OutputSet::create(&ctx.out_dir)?;
    out.csv("smc_trace.csv", "smc_trace/v1", &table)?;
    out.json("smc_summary.json", "smc_summary/v1", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct RareEventSummary {
    n_particles: usize,
    replications: usize,
    levels: Vec<i64>,
    estimate: f64,
    standard_error: Option<f64>,
    mean_fractions: Vec<f64>,
    total_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_probability: Option<f64>,
}

fn run_rare_event_cmd(ctx: &RunContext) -> Result<OutputSet, CliError> {
    let params = ctx.config.rare_event.validate()?;
    let chain = &params.chain;
    let exact = ctx.oracle.then(|| {
        gamblers_ruin_probability(chain.start, chain.lower, *chain.levels.last().expect("validated"), chain.p_up)
    });
    let est = splitting_replicated(chain, params.n_particles, params.replications, ctx.seeder().named("rare-event"))
        .map_err(CliError::algorithm("rare-event"))?;

    let k = chain.levels.len();
    let mut cols: Vec<String> = ["replication", "estimate", "total_steps", "extinct_at"].map(String::from).into();
    cols.extend(indexed("fraction_", k));
    let mut table = Table::new(cols);
    for (r, run) in est.runs.iter().enumerate() {
        let mut row = vec![
            (r + 1).to_string(),
            fmt_f64(run.estimate),
            run.total_steps.to_string(),
            run.extinct_at.map_or(String::new(), |l| (l + 1).to_string()),
        ];
        row.extend((0..k).map(|j| run.fractions.get(j).map_or(String::new(), |f| fmt_f64(*f))));
        table.push(row);
    }
    let summary = RareEventSummary {
        n_particles: params.n_particles,
        replications: params.replications,
        levels: chain.levels.clone(),
        estimate: est.mean,
        standard_error: est.standard_error,
        mean_fractions: est.mean_fractions(),
        total_steps: est.runs.iter().map(|r| r.total_steps).sum(),
        exact_probability: exact,
    };
    let mut out = OutputSet::create(&ctx.out_dir)?;
    out.csv("rare_event_runs.csv", "rare_event_runs/v1", &table)?;
    out.json("rare_event_summary.json", "rare_event_summary/v1", &summary)?;
    Ok(out)
}
