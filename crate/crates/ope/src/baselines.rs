//! The comparison suite: importance-sampling estimators, the direct method,
//! the weighted doubly-robust estimator, the partial-return family `g_j`
//! interpolating between them, and the MAGIC ensemble.

use serde::{Deserialize, Serialize};

use crate::ensemble::{bias_estimates, resample_indices, solve_simplex_qp, QpSolution};
use crate::error::{OpeError, Result};
use crate::mdp::{cumulative_ratios, Dataset, DiscountSpec, ObsId, StochasticPolicy};
use crate::model::{value_tables, QStack};
use crate::seeding::{derive_seed, streams};

/// Self-normalized importance weights `w_t^(i) = rho_t^(i) / sum_i rho_t^(i)`.
///
/// At every `t` the weights over trajectories sum to one, unless all
/// cumulative ratios vanish there, in which case the whole column is zero
/// and the step is flagged as degenerate (estimators then fall back to the
/// uncorrected model term at that step).
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizedWeights {
    /// `w[t-1][i]`.
    pub w: Vec<Vec<f64>>,
    /// Steps whose ratio column was identically zero.
    pub degenerate: Vec<bool>,
}

impl StabilizedWeights {
    /// Builds weights from precomputed cumulative ratios `ratios[i][t-1]`.
    pub fn from_ratios(ratios: &[Vec<f64>], horizon: usize) -> StabilizedWeights {
        let n = ratios.len();
        let mut w = vec![vec![0.0; n]; horizon];
        let mut degenerate = vec![false; horizon];
        for t in 0..horizon {
            let total: f64 = ratios.iter().map(|r| r[t]).sum();
            if total > 0.0 {
                for (i, r) in ratios.iter().enumerate() {
                    w[t][i] = r[t] / total;
                }
            } else {
                degenerate[t] = true;
            }
        }
        StabilizedWeights { w, degenerate }
    }
}

pub fn stabilized_weights(
    dataset: &Dataset,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
) -> Result<StabilizedWeights> {
    if dataset.is_empty() {
        return Err(OpeError::Config("empty dataset".into()));
    }
    let ratios = cumulative_ratios(dataset, pi_e, pi_b)?;
    Ok(StabilizedWeights::from_ratios(&ratios, dataset.horizon))
}

/// Direct-method estimate `V_1(s_1) = sum_a pi_e(a|s_1) Q_1(s_1, a)`.
pub fn dm_estimate(q: &QStack, pi_e: &StochasticPolicy, initial_obs: ObsId) -> f64 {
    pi_e.row(1, initial_obs)
        .iter()
        .zip(&q.q[0][initial_obs])
        .map(|(&p, &qv)| p * qv)
        .sum()
}

/// Weighted doubly-robust estimate: the model value plus stabilized,
/// discounted Bellman-residual corrections,
/// `sum_i { V_1(s_1)/n + sum_t gamma^(t-1) w_t^i [R_t + gamma V_{t+1}(S_{t+1}) - Q_t(S_t,A_t)] }`
/// with `V_{T+1} = 0` and `w_0 = 1/n`. Steps whose ratio column is all zero
/// contribute no correction (the model term stands in).
pub fn wdr_estimate(
    dataset: &Dataset,
    q: &QStack,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
) -> Result<f64> {
    let n = dataset.len();
    if n == 0 {
        return Err(OpeError::Config("empty dataset".into()));
    }
    let horizon = dataset.horizon;
    if q.horizon() != horizon {
        return Err(OpeError::Config(format!(
            "Q stack horizon {} does not match dataset horizon {horizon}",
            q.horizon()
        )));
    }
    q.validate()?;
    let ratios = cumulative_ratios(dataset, pi_e, pi_b)?;
    let weights = StabilizedWeights::from_ratios(&ratios, horizon);
    let v = value_tables(q, pi_e);
    let mut estimate = 0.0;
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let initial_obs = dataset.obs_of(traj.steps[0].state);
        estimate += v[0][initial_obs] / n as f64;
        let mut gamma_pow = 1.0;
        for t in 1..=horizon {
            let step = traj.step(t);
            let obs = dataset.obs_of(step.state);
            let future = if t < horizon {
                discount.gamma * v[t][dataset.obs_of(traj.step(t + 1).state)]
            } else {
                0.0
            };
            estimate += gamma_pow
                * weights.w[t - 1][i]
                * (step.reward + future - q.q[t - 1][obs][step.action]);
            gamma_pow *= discount.gamma;
        }
    }
    Ok(estimate)
}

/// Per-trajectory partial returns. Row `i`, column `j in 0..=T` holds the
/// trajectory's contribution scaled by `n`, so every column mean equals the
/// corresponding estimator: column 0 is the direct method, column `T` is
/// WDR, and intermediate columns cut the corrections off after step `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialReturnMatrix {
    /// `per_trajectory[i][j]`; column means equal `estimates`.
    pub per_trajectory: Vec<Vec<f64>>,
    /// `g_j` for `j = 0..=T`.
    pub estimates: Vec<f64>,
    /// Steps with all-zero ratio columns.
    pub degenerate_steps: Vec<usize>,
}

pub fn partial_returns(
    dataset: &Dataset,
    q: &QStack,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
) -> Result<PartialReturnMatrix> {
    let n = dataset.len();
    if n == 0 {
        return Err(OpeError::Config("empty dataset".into()));
    }
    let horizon = dataset.horizon;
    if q.horizon() != horizon {
        return Err(OpeError::Config(format!(
            "Q stack horizon {} does not match dataset horizon {horizon}",
            q.horizon()
        )));
    }
    q.validate()?;
    let ratios = cumulative_ratios(dataset, pi_e, pi_b)?;
    let weights = StabilizedWeights::from_ratios(&ratios, horizon);
    let v = value_tables(q, pi_e);
    let nf = n as f64;
    let mut per_trajectory = vec![vec![0.0; horizon + 1]; n];
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        // Running sum of gamma^(t-1) [w_t R_t - w_t Q_t(S_t,A_t) + w_{t-1} V_t(S_t)].
        let mut acc = 0.0;
        let initial_obs = dataset.obs_of(traj.steps[0].state);
        per_trajectory[i][0] = v[0][initial_obs]; // n * w_0 * V_1, with w_0 = 1/n
        let mut gamma_pow = 1.0; // gamma^(t-1)
        for t in 1..=horizon {
            let step = traj.step(t);
            let obs = dataset.obs_of(step.state);
            let w_t = weights.w[t - 1][i];
            let w_prev = if t == 1 { 1.0 / nf } else { weights.w[t - 2][i] };
            acc += gamma_pow * (w_t * step.reward - w_t * q.q[t - 1][obs][step.action]
                + w_prev * v[t - 1][obs]);
            let tail = if t < horizon {
                let next_obs = dataset.obs_of(traj.step(t + 1).state);
                gamma_pow * discount.gamma * w_t * v[t][next_obs]
            } else {
                0.0
            };
            per_trajectory[i][t] = nf * (acc + tail);
            gamma_pow *= discount.gamma;
        }
    }
    let estimates = (0..=horizon)
        .map(|j| per_trajectory.iter().map(|row| row[j]).sum::<f64>() / nf)
        .collect();
    let degenerate_steps = weights
        .degenerate
        .iter()
        .enumerate()
        .filter_map(|(t, &d)| d.then_some(t + 1))
        .collect();
    Ok(PartialReturnMatrix { per_trajectory, estimates, degenerate_steps })
}

/// MAGIC's output: the blended estimate plus the pieces it was blended from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MagicResult {
    pub estimate: f64,
    /// Simplex weights over the partial returns `g_0..g_T`.
    pub weights: Vec<f64>,
    pub g: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub qp: QpSolution,
}

/// MAGIC: the convex combination of partial returns minimizing an estimated
/// MSE. The covariance of `g` comes from the per-trajectory vectors; the
/// bias of each `g_j` is its distance to a percentile bootstrap confidence
/// interval of `g_T`.
#[allow(clippy::too_many_arguments)]
pub fn magic_estimate(
    dataset: &Dataset,
    q: &QStack,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
    bootstrap_samples: usize,
    ci_level: f64,
    seed: u64,
) -> Result<MagicResult> {
    if bootstrap_samples < 100 {
        return Err(OpeError::Config(format!(
            "MAGIC needs at least 100 bootstrap samples, got {bootstrap_samples}"
        )));
    }
    let n = dataset.len();
    let prm = partial_returns(dataset, q, pi_e, pi_b, discount)?;
    let omega_rows = crate::ensemble::covariance_rows(&prm.per_trajectory)?;
    let nf = n as f64;
    let omega: Vec<Vec<f64>> =
        omega_rows.iter().map(|row| row.iter().map(|&v| v / nf).collect()).collect();
    let mut boot_gt = Vec::with_capacity(bootstrap_samples);
    for b in 0..bootstrap_samples {
        let idx = resample_indices(n, derive_seed(seed, &[streams::BOOTSTRAP, b as u64]));
        let replicate = dataset.subset(&idx);
        boot_gt.push(wdr_estimate(&replicate, q, pi_e, pi_b, discount)?);
    }
    let bias = bias_estimates(&prm.estimates, &boot_gt, ci_level)?;
    let qp = solve_simplex_qp(&omega, &bias)?;
    let estimate = qp.x.iter().zip(&prm.estimates).map(|(&x, &g)| x * g).sum();
    Ok(MagicResult {
        estimate,
        weights: qp.x.clone(),
        g: prm.estimates,
        omega,
        bias,
        qp,
    })
}

/// The plain importance-sampling family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsFamily {
    /// Full-trajectory importance sampling.
    pub is: f64,
    /// Per-decision importance sampling.
    pub pdis: f64,
    /// Weighted (self-normalized) importance sampling.
    pub wis: f64,
    /// Consistent weighted per-decision importance sampling.
    pub cwpdis: f64,
}

pub fn is_family(
    dataset: &Dataset,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
) -> Result<IsFamily> {
    let n = dataset.len();
    if n == 0 {
        return Err(OpeError::Config("empty dataset".into()));
    }
    let horizon = dataset.horizon;
    let ratios = cumulative_ratios(dataset, pi_e, pi_b)?;
    let weights = StabilizedWeights::from_ratios(&ratios, horizon);
    let nf = n as f64;
    let mut is = 0.0;
    let mut pdis = 0.0;
    let mut wis = 0.0;
    let mut cwpdis = 0.0;
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let ret = crate::mdp::return_to_go(traj, 1, discount);
        is += ratios[i][horizon - 1] * ret / nf;
        wis += weights.w[horizon - 1][i] * ret;
        let mut gamma_pow = 1.0;
        for t in 1..=horizon {
            let r = traj.step(t).reward;
            pdis += gamma_pow * ratios[i][t - 1] * r / nf;
            cwpdis += gamma_pow * weights.w[t - 1][i] * r;
            gamma_pow *= discount.gamma;
        }
    }
    Ok(IsFamily { is, pdis, wis, cwpdis })
}
