//! Experiment driver: sweeps (sample size, misspecification scale, trial),
//! runs every requested estimator on identical inputs, scores squared error
//! against the dynamic-programming oracle, and emits machine-readable
//! results (JSON) and per-cell aggregates (CSV).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{dm_estimate, is_family, magic_estimate, wdr_estimate};
use crate::ensemble::{rltmle1, rltmle2};
use crate::envs::{env_by_name, EnvironmentSpec};
use crate::error::{OpeError, Result};
use crate::ltmle::{cv_ltmle, ltmle_backward, LtmleConfig, RegularizationTriple};
use crate::mdp::{exact_policy_value, simulate, Dataset, DiscountSpec, StochasticPolicy};
use crate::model::{fit_empirical_model, inject_bias, q_from_model, QStack};
use crate::seeding::{derive_seed, streams};

/// Estimator keys the harness understands.
pub const ESTIMATOR_KEYS: [&str; 11] = [
    "is", "pdis", "wis", "cwpdis", "dm", "wdr", "magic", "ltmle", "rltmle1", "rltmle2", "cvltmle",
];

fn default_gamma() -> f64 {
    1.0
}
fn default_scales() -> Vec<f64> {
    vec![0.0]
}
fn default_trials() -> usize {
    63
}
fn default_estimators() -> Vec<String> {
    vec!["dm".into(), "wdr".into(), "magic".into(), "rltmle2".into()]
}
fn default_bootstrap() -> usize {
    200
}
fn default_ci_level() -> f64 {
    0.1
}
fn default_split() -> f64 {
    0.5
}
fn default_smoothing() -> f64 {
    0.5
}
fn default_folds() -> usize {
    2
}
fn default_output() -> String {
    "results.json".into()
}
fn default_true() -> bool {
    true
}

/// One experiment sweep. Unset fields take the documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registered environment name (`modelwin`, `modelfail`, `gridworld`).
    pub environment: String,
    /// Overrides the environment's default horizon.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_scales")]
    pub misspecification_scales: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    /// Regularization pool for the ensembles; the default grid spans
    /// softening x partial horizon x penalty with the unregularized triple
    /// last.
    #[serde(default)]
    pub regularization_grid: Option<Vec<RegularizationTriple>>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_samples: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Fraction of each dataset used for targeting/evaluation; the rest
    /// fits the model.
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    /// Folds for the cross-validated estimator.
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Replaces the fitted model with the exact action-value functions
    /// (identity observation maps only); misspecification noise still
    /// applies on top.
    #[serde(default)]
    pub use_exact_q: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: String,
    /// Worker threads; 0 picks the rayon default.
    #[serde(default)]
    pub workers: usize,
    /// Recording wall-clock timings makes result files non-reproducible
    /// byte-for-byte; switch off for determinism checks.
    #[serde(default = "default_true")]
    pub record_timings: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        env_by_name(&self.environment)?;
        if self.trials == 0 {
            return Err(OpeError::Config("trial count must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() {
            return Err(OpeError::Config("sample_sizes must be non-empty".into()));
        }
        for key in &self.estimators {
            if !ESTIMATOR_KEYS.contains(&key.as_str()) {
                return Err(OpeError::Config(format!(
                    "unknown estimator key '{key}'; known: {}",
                    ESTIMATOR_KEYS.join(", ")
                )));
            }
        }
        DiscountSpec::new(self.gamma)?;
        Ok(())
    }
}

/// The default regularization pool for a given horizon:
/// alpha in {0, 0.5, 1} x tau in {0, T/4, T/2, T} x lambda in {0, 0.01},
/// deduplicated, with the unregularized `(1, T, 0)` moved to the end.
pub fn default_reg_grid(horizon: usize) -> Vec<RegularizationTriple> {
    let taus = {
        let mut t = vec![0, horizon.div_ceil(4), horizon.div_ceil(2), horizon];
        t.dedup();
        t
    };
    let mut grid = Vec::new();
    for &alpha in &[0.0, 0.5, 1.0] {
        for &tau in &taus {
            for &lambda in &[0.0, 0.01] {
                let triple = RegularizationTriple::new(alpha, tau, lambda);
                if !grid.contains(&triple) && !triple.is_unregularized(horizon) {
                    grid.push(triple);
                }
            }
        }
    }
    grid.push(RegularizationTriple::unregularized(horizon));
    grid
}

/// Per-trial outcome: everything needed to recompute the aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub n: usize,
    pub scale: f64,
    pub trial: usize,
    pub estimates: BTreeMap<String, f64>,
    pub squared_errors: BTreeMap<String, f64>,
    /// Estimators that failed on this trial, with the error text.
    #[serde(default)]
    pub failures: BTreeMap<String, String>,
    /// Wall time per estimator in milliseconds (absent when timing is off).
    #[serde(default)]
    pub wall_ms: Option<BTreeMap<String, f64>>,
    /// Second-stage / ensemble diagnostics per estimator.
    #[serde(default)]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub truth: f64,
    pub horizon: usize,
    pub trials: Vec<TrialResult>,
}

/// Everything one estimator invocation consumes. All estimators in a trial
/// share the same dataset, initial estimator, and bias perturbation; only
/// estimator-internal randomness (bootstrapping) draws from `seed`.
pub struct EstimationInputs<'a> {
    /// The full dataset, consumed only by the cross-validated estimator
    /// (which refits the model per fold).
    pub full: &'a Dataset,
    /// The targeting/evaluation split all other estimators run on.
    pub target: &'a Dataset,
    pub q: &'a QStack,
    pub pi_e: &'a StochasticPolicy,
    pub pi_b: &'a StochasticPolicy,
    pub discount: DiscountSpec,
    pub horizon: usize,
    pub bootstrap_samples: usize,
    pub ci_level: f64,
    pub smoothing: f64,
    pub folds: usize,
    /// Misspecification scale and seed, re-applied by the cross-validated
    /// estimator to each fold's refit.
    pub scale: f64,
    pub bias_seed: u64,
    /// Master seed for estimator-scoped randomness.
    pub seed: u64,
    pub grid: &'a [RegularizationTriple],
    pub ltmle_config: LtmleConfig,
}

/// Dispatches one estimator by key, returning the estimate and a
/// diagnostics blob (fluctuations, ensemble weights, flags).
pub fn run_estimator(key: &str, inputs: &EstimationInputs) -> Result<(f64, serde_json::Value)> {
    let pi_e = inputs.pi_e;
    let pi_b = inputs.pi_b;
    let disc = inputs.discount;
    let est_seed = |tag: u64| derive_seed(inputs.seed, &[streams::ESTIMATOR, tag]);
    match key {
        "is" | "pdis" | "wis" | "cwpdis" => {
            let fam = is_family(inputs.target, pi_e, pi_b, disc)?;
            let value = match key {
                "is" => fam.is,
                "pdis" => fam.pdis,
                "wis" => fam.wis,
                _ => fam.cwpdis,
            };
            Ok((value, serde_json::Value::Null))
        }
        "dm" => {
            let obs = inputs.target.initial_obs()?;
            Ok((dm_estimate(inputs.q, pi_e, obs), serde_json::Value::Null))
        }
        "wdr" => {
            let value = wdr_estimate(inputs.target, inputs.q, pi_e, pi_b, disc)?;
            Ok((value, serde_json::Value::Null))
        }
        "magic" => {
            let out = magic_estimate(
                inputs.target,
                inputs.q,
                pi_e,
                pi_b,
                disc,
                inputs.bootstrap_samples,
                inputs.ci_level,
                est_seed(7),
            )?;
            Ok((out.estimate, json!({ "weights": out.weights, "bias": out.bias })))
        }
        "ltmle" => {
            let reg = RegularizationTriple::unregularized(inputs.horizon);
            let fit = ltmle_backward(
                inputs.target,
                inputs.q,
                pi_e,
                pi_b,
                disc,
                reg,
                &inputs.ltmle_config,
            )?;
            Ok((fit.estimate, serde_json::to_value(&fit.fit)?))
        }
        "rltmle1" | "rltmle2" => {
            let runner = if key == "rltmle1" { rltmle1 } else { rltmle2 };
            let out = runner(
                inputs.target,
                inputs.q,
                pi_e,
                pi_b,
                disc,
                inputs.grid,
                inputs.bootstrap_samples,
                inputs.ci_level,
                &inputs.ltmle_config,
                est_seed(if key == "rltmle1" { 11 } else { 13 }),
            )?;
            Ok((
                out.estimate,
                json!({
                    "x_hat": out.solution.x_hat,
                    "b_hat": out.solution.b_hat,
                    "g": out.bank.g,
                    "kkt_residual": out.qp.kkt_residual,
                }),
            ))
        }
        "cvltmle" => {
            let reg = RegularizationTriple::unregularized(inputs.horizon);
            let ltmle_config = LtmleConfig { folds: inputs.folds, ..inputs.ltmle_config };
            let horizon = inputs.horizon;
            let scale = inputs.scale;
            let bias_seed = inputs.bias_seed;
            let smoothing = inputs.smoothing;
            let initial = |sub: &Dataset| -> Result<QStack> {
                let model = fit_empirical_model(sub, &sub.observation_map, smoothing)?;
                let q = q_from_model(&model, pi_e, horizon, disc)?;
                inject_bias(&q, scale, bias_seed)
            };
            let fit = cv_ltmle(inputs.full, initial, pi_e, pi_b, disc, reg, &ltmle_config)?;
            Ok((fit.estimate, serde_json::to_value(&fit.fit)?))
        }
        other => Err(OpeError::Config(format!("unknown estimator key '{other}'"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    config: &ExperimentConfig,
    env: &EnvironmentSpec,
    horizon: usize,
    discount: DiscountSpec,
    truth: f64,
    grid: &[RegularizationTriple],
    n: usize,
    scale: f64,
    trial: usize,
) -> TrialResult {
    let trial_seed =
        derive_seed(config.seed, &[streams::TRIAL, n as u64, scale.to_bits(), trial as u64]);
    let mut result = TrialResult {
        n,
        scale,
        trial,
        estimates: BTreeMap::new(),
        squared_errors: BTreeMap::new(),
        failures: BTreeMap::new(),
        wall_ms: config.record_timings.then(BTreeMap::new),
        diagnostics: BTreeMap::new(),
    };
    let prepared = (|| -> Result<(Dataset, Dataset, QStack, u64)> {
        let full = simulate(
            &env.mdp,
            &env.behavior,
            horizon,
            n,
            derive_seed(trial_seed, &[streams::SIMULATE]),
        )?;
        let (model_split, target) = full.split_targeting(config.split_fraction)?;
        let bias_seed = derive_seed(trial_seed, &[streams::INJECT]);
        let q = if config.use_exact_q {
            let identity = (0..env.mdp.num_states).all(|s| env.mdp.observation_map[s] == s);
            if !identity {
                return Err(OpeError::Config(
                    "use_exact_q requires an identity observation map".into(),
                ));
            }
            crate::mdp::exact_q_functions(&env.mdp, &env.evaluation, horizon, discount)?
        } else {
            let model =
                fit_empirical_model(&model_split, &model_split.observation_map, config.smoothing)?;
            q_from_model(&model, &env.evaluation, horizon, discount)?
        };
        let q = inject_bias(&q, scale, bias_seed)?;
        Ok((full, target, q, bias_seed))
    })();
    let (full, target, q, bias_seed) = match prepared {
        Ok(prepared) => prepared,
        Err(e) => {
            for key in &config.estimators {
                result.failures.insert(key.clone(), e.to_string());
            }
            return result;
        }
    };
    let inputs = EstimationInputs {
        full: &full,
        target: &target,
        q: &q,
        pi_e: &env.evaluation,
        pi_b: &env.behavior,
        discount,
        horizon,
        bootstrap_samples: config.bootstrap_samples,
        ci_level: config.ci_level,
        smoothing: config.smoothing,
        folds: config.folds,
        scale,
        bias_seed,
        seed: trial_seed,
        grid,
        ltmle_config: LtmleConfig { folds: config.folds, ..LtmleConfig::default() },
    };
    for key in &config.estimators {
        let start = Instant::now();
        match run_estimator(key, &inputs) {
            Ok((value, diag)) => {
                result.estimates.insert(key.clone(), value);
                result.squared_errors.insert(key.clone(), (value - truth) * (value - truth));
                if !diag.is_null() {
                    result.diagnostics.insert(key.clone(), diag);
                }
            }
            Err(e) => {
                result.failures.insert(key.clone(), e.to_string());
            }
        }
        if let Some(wall) = result.wall_ms.as_mut() {
            wall.insert(key.clone(), start.elapsed().as_secs_f64() * 1e3);
        }
    }
    result
}

/// Runs the full sweep. Deterministic in `(config, seed)` regardless of the
/// worker count: every trial derives its own seed chain and the results are
/// reduced in trial order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let env = env_by_name(&config.environment)?;
    let horizon = config.horizon.unwrap_or(env.default_horizon);
    let discount = DiscountSpec::new(config.gamma)?;
    let truth = exact_policy_value(&env.mdp, &env.evaluation, horizon, discount)?;
    let grid = config.regularization_grid.clone().unwrap_or_else(|| default_reg_grid(horizon));
    for triple in &grid {
        triple.validate(horizon)?;
    }

    let mut cells = Vec::new();
    for &n in &config.sample_sizes {
        for &scale in &config.misspecification_scales {
            for trial in 0..config.trials {
                cells.push((n, scale, trial));
            }
        }
    }
    let work = |cells: &[(usize, f64, usize)]| -> Vec<TrialResult> {
        cells
            .par_iter()
            .map(|&(n, scale, trial)| {
                run_trial(config, &env, horizon, discount, truth, &grid, n, scale, trial)
            })
            .collect()
    };
    let trials = if config.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| OpeError::Config(format!("worker pool: {e}")))?;
        pool.install(|| work(&cells))
    } else {
        work(&cells)
    };
    Ok(ExperimentResults { config: config.clone(), truth, horizon, trials })
}

/// One aggregate row of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub env: String,
    pub estimator: String,
    pub n: usize,
    pub scale: f64,
    pub trials: usize,
    pub mse: f64,
    pub mse_se: f64,
    pub bias: f64,
    pub variance: f64,
    pub mean_runtime_ms: f64,
}

/// Jackknife standard error of the mean of `xs`.
pub fn jackknife_se_mean(xs: &[f64]) -> f64 {
    let m = xs.len();
    if m < 2 {
        return 0.0;
    }
    let total: f64 = xs.iter().sum();
    let mf = m as f64;
    let loo: Vec<f64> = xs.iter().map(|&x| (total - x) / (mf - 1.0)).collect();
    let loo_mean: f64 = loo.iter().sum::<f64>() / mf;
    let ss: f64 = loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).sum();
    ((mf - 1.0) / mf * ss).sqrt()
}

/// Aggregates trial results into one row per `(estimator, n, scale)`.
pub fn summarize(results: &ExperimentResults) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for key in &results.config.estimators {
        for &n in &results.config.sample_sizes {
            for &scale in &results.config.misspecification_scales {
                let cell: Vec<&TrialResult> = results
                    .trials
                    .iter()
                    .filter(|t| t.n == n && t.scale == scale && t.estimates.contains_key(key))
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let sq: Vec<f64> = cell.iter().map(|t| t.squared_errors[key]).collect();
                let est: Vec<f64> = cell.iter().map(|t| t.estimates[key]).collect();
                let m = sq.len() as f64;
                let mse = sq.iter().sum::<f64>() / m;
                let mean_est = est.iter().sum::<f64>() / m;
                let bias = mean_est - results.truth;
                let variance =
                    est.iter().map(|e| (e - mean_est) * (e - mean_est)).sum::<f64>() / m;
                let runtime_total: f64 = cell
                    .iter()
                    .filter_map(|t| t.wall_ms.as_ref().and_then(|w| w.get(key)))
                    .sum();
                // An empty sum is IEEE -0.0; keep the column at plain zero.
                let mean_runtime_ms = if runtime_total == 0.0 { 0.0 } else { runtime_total / m };
                rows.push(ReportRow {
                    env: results.config.environment.clone(),
                    estimator: key.clone(),
                    n,
                    scale,
                    trials: sq.len(),
                    mse,
                    mse_se: jackknife_se_mean(&sq),
                    bias,
                    variance,
                    mean_runtime_ms,
                });
            }
        }
    }
    rows
}

pub const CSV_HEADER: &str =
    "env,estimator,n,scale,trials,mse,mse_se,bias,variance,mean_runtime_ms";

/// Renders aggregate rows as CSV with a fixed column set and deterministic
/// float formatting.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.3}\n",
            r.env, r.estimator, r.n, r.scale, r.trials, r.mse, r.mse_se, r.bias, r.variance,
            r.mean_runtime_ms
        ));
    }
    out
}

/// JSON summary with the config echo and a version stamp.
pub fn report_summary(results: &ExperimentResults, rows: &[ReportRow]) -> serde_json::Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": results.config,
        "truth": results.truth,
        "horizon": results.horizon,
        "cells": rows,
    })
}

pub fn write_results(results: &ExperimentResults, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(results)?)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<ExperimentResults> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
