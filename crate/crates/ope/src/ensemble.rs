//! Ensembling of regularized targeted estimators: bootstrap resampling,
//! covariance and bias estimation for a bank of base estimators, the
//! simplex-constrained MSE quadratic program, and the two ensemble variants
//! (influence-function covariance vs bootstrap covariance).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::ltmle::{ltmle_backward, LtmleConfig, LtmleFit, RegularizationTriple, SecondStageFit};
use crate::mdp::{Dataset, DiscountSpec, StochasticPolicy};
use crate::model::QStack;
use crate::seeding::{derive_seed, streams};

/// `n` indices drawn with replacement from `0..n`, deterministically in the
/// seed.
pub fn resample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `b` bootstrap replicates of the dataset, each drawing `n` whole
/// trajectories with replacement. Replicate `k` uses the sub-seed
/// `derive_seed(seed, [BOOTSTRAP, k])`.
pub fn bootstrap_resample(dataset: &Dataset, b: usize, seed: u64) -> Result<Vec<Dataset>> {
    if b == 0 {
        return Err(OpeError::Config("bootstrap replicate count must be positive".into()));
    }
    let n = dataset.len();
    Ok((0..b)
        .map(|k| dataset.subset(&resample_indices(n, derive_seed(seed, &[streams::BOOTSTRAP, k as u64]))))
        .collect())
}

/// Population covariance of the rows of an `R x K` table (two-pass,
/// divide-by-`R`).
pub fn covariance_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let r = rows.len();
    if r < 2 {
        return Err(OpeError::Config("covariance needs at least two rows".into()));
    }
    let k = rows[0].len();
    if rows.iter().any(|row| row.len() != k) {
        return Err(OpeError::Config("ragged covariance input".into()));
    }
    let rf = r as f64;
    let mut means = vec![0.0; k];
    for row in rows {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v / rf;
        }
    }
    let mut cov = vec![vec![0.0; k]; k];
    for row in rows {
        for i in 0..k {
            let di = row[i] - means[i];
            for j in i..k {
                cov[i][j] += di * (row[j] - means[j]) / rf;
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    Ok(cov)
}

/// Covariance of the base-estimator vector from bootstrap replicate values
/// (`B x K`): the empirical covariance across replicates. The replicates
/// already are estimator values, so no further sample-size scaling applies.
pub fn covariance_bootstrap(bootstrap_values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    covariance_rows(bootstrap_values)
}

/// Covariance of the base-estimator vector from per-trajectory influence
/// values (`n x K`): the empirical covariance of the rows divided by `n`,
/// which estimates the covariance of their mean.
pub fn covariance_eif(per_trajectory_eifs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = per_trajectory_eifs.len() as f64;
    let mut cov = covariance_rows(per_trajectory_eifs)?;
    for row in &mut cov {
        for v in row {
            *v /= n;
        }
    }
    Ok(cov)
}

/// Nearest-rank percentile of a sorted slice: the smallest element whose
/// cumulative share is at least `q`.
pub fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let b = sorted.len();
    let rank = (q * b as f64).ceil() as usize;
    sorted[rank.clamp(1, b) - 1]
}

/// Distance of each `g_k` to the percentile bootstrap confidence interval
/// `[pct(ci/2), pct(1 - ci/2)]` of the anchor estimator's replicates; zero
/// inside the interval.
pub fn bias_estimates(g: &[f64], anchor_bootstrap: &[f64], ci_level: f64) -> Result<Vec<f64>> {
    if anchor_bootstrap.is_empty() {
        return Err(OpeError::Config("bias estimation needs bootstrap replicates".into()));
    }
    if !(0.0 < ci_level && ci_level < 1.0) {
        return Err(OpeError::Config(format!("ci_level must lie in (0,1), got {ci_level}")));
    }
    let mut sorted = anchor_bootstrap.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_nearest_rank(&sorted, ci_level / 2.0);
    let hi = percentile_nearest_rank(&sorted, 1.0 - ci_level / 2.0);
    Ok(g.iter()
        .map(|&v| {
            if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            }
        })
        .collect())
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if uj - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    let mut x: Vec<f64> = v.iter().map(|&vi| (vi - theta).max(0.0)).collect();
    // Push rounding residue onto the largest coordinate so the sum is exact.
    let sum: f64 = x.iter().sum();
    if let Some(max_idx) =
        (0..d).max_by(|&a, &b| x[a].total_cmp(&x[b]))
    {
        x[max_idx] += 1.0 - sum;
    }
    x
}

/// Solution of the simplex QP with convergence diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Max complementary-slackness violation `x_i (grad_i - min_j grad_j)`.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Minimizes `x' Omega x + (x' b)^2` over the probability simplex by
/// accelerated projected gradient with a monotone safeguard. `Omega` is
/// symmetrized first; covariance inputs are positive semidefinite by
/// construction up to rounding.
pub fn solve_simplex_qp(omega: &[Vec<f64>], b_hat: &[f64]) -> Result<QpSolution> {
    let k = b_hat.len();
    if k == 0 || omega.len() != k || omega.iter().any(|row| row.len() != k) {
        return Err(OpeError::Config("QP needs a square Omega matching b".into()));
    }
    if b_hat.iter().any(|v| !v.is_finite())
        || omega.iter().any(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(OpeError::Solver("non-finite QP inputs".into()));
    }
    let mut a = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = 0.5 * (omega[i][j] + omega[j][i]);
        }
    }
    let objective = |x: &[f64]| -> f64 {
        let mut quad = 0.0;
        for i in 0..k {
            let mut row = 0.0;
            for j in 0..k {
                row += a[i][j] * x[j];
            }
            quad += x[i] * row;
        }
        let bx: f64 = b_hat.iter().zip(x).map(|(&bi, &xi)| bi * xi).sum();
        quad + bx * bx
    };
    let gradient = |x: &[f64], out: &mut Vec<f64>| {
        let bx: f64 = b_hat.iter().zip(x).map(|(&bi, &xi)| bi * xi).sum();
        for i in 0..k {
            let mut row = 0.0;
            for j in 0..k {
                row += a[i][j] * x[j];
            }
            out[i] = 2.0 * (row + bx * b_hat[i]);
        }
    };
    // Lipschitz bound: lambda_max(A + b b') <= max abs row sum of A + |b|^2.
    let row_bound = a
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let b_norm2: f64 = b_hat.iter().map(|v| v * v).sum();
    let lipschitz = 2.0 * (row_bound + b_norm2);
    let uniform = vec![1.0 / k as f64; k];
    if lipschitz == 0.0 {
        return Ok(QpSolution { x: uniform, objective: 0.0, kkt_residual: 0.0, iterations: 0 });
    }
    let step = 1.0 / lipschitz;
    let max_iterations = 10_000;

    let run = |x0: Vec<f64>| -> (Vec<f64>, f64, usize) {
        let mut x = project_to_simplex(&x0);
        let mut x_prev = x.clone();
        let mut f_x = objective(&x);
        let mut t_k = 1.0f64;
        let mut grad = vec![0.0; k];
        let mut iterations = 0;
        for iter in 0..max_iterations {
            iterations = iter + 1;
            // Gradient-mapping step from x doubles as the convergence check
            // and the monotone fallback.
            gradient(&x, &mut grad);
            let mapped = project_to_simplex(
                &x.iter().zip(&grad).map(|(&xi, &gi)| xi - step * gi).collect::<Vec<f64>>(),
            );
            let movement = mapped
                .iter()
                .zip(&x)
                .map(|(&m, &xi)| (m - xi).abs())
                .fold(0.0, f64::max);
            if movement < 1e-14 {
                break;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            let momentum = (t_k - 1.0) / t_next;
            let y: Vec<f64> = x
                .iter()
                .zip(&x_prev)
                .map(|(&xi, &xp)| xi + momentum * (xi - xp))
                .collect();
            gradient(&y, &mut grad);
            let accelerated = project_to_simplex(
                &y.iter().zip(&grad).map(|(&yi, &gi)| yi - step * gi).collect::<Vec<f64>>(),
            );
            let f_acc = objective(&accelerated);
            let f_mapped = objective(&mapped);
            x_prev = std::mem::take(&mut x);
            if f_acc <= f_mapped {
                x = accelerated;
                f_x = f_acc;
                t_k = t_next;
            } else {
                x = mapped;
                f_x = f_mapped;
                t_k = 1.0;
            }
        }
        (x, f_x, iterations)
    };

    let (mut x, mut f_x, mut iterations) = run(uniform);
    // A vertex strictly better than the iterate means the solver stalled;
    // restart from that vertex.
    let mut best_vertex = None;
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        let f_e = objective(&e);
        if f_e < f_x - 1e-12 {
            f_x = f_e;
            best_vertex = Some(e);
        }
    }
    if let Some(v) = best_vertex {
        let (x2, f2, it2) = run(v);
        x = x2;
        f_x = f2;
        iterations += it2;
    }

    let mut grad = vec![0.0; k];
    gradient(&x, &mut grad);
    let mu = grad.iter().cloned().fold(f64::INFINITY, f64::min);
    let complementarity = x
        .iter()
        .zip(&grad)
        .map(|(&xi, &gi)| xi * (gi - mu))
        .fold(0.0, f64::max);
    let sum_gap = (x.iter().sum::<f64>() - 1.0).abs();
    let kkt_residual = complementarity.max(sum_gap);
    if kkt_residual > 1e-6 {
        return Err(OpeError::Solver(format!(
            "simplex QP did not converge: KKT residual {kkt_residual:.3e} after {iterations} iterations, best iterate {x:?}"
        )));
    }
    Ok(QpSolution { x, objective: f_x, kkt_residual, iterations })
}

/// The bank of base estimators an ensemble is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorBank {
    pub triples: Vec<RegularizationTriple>,
    /// Base-estimator values on the original data; the last entry is the
    /// unregularized estimator.
    pub g: Vec<f64>,
    /// `n x K` per-trajectory influence values (influence-covariance path).
    pub per_trajectory_eifs: Option<Vec<Vec<f64>>>,
    /// `B x K` replicate values (bootstrap-covariance path).
    pub bootstrap_values: Option<Vec<Vec<f64>>>,
}

/// The fitted convex combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSolution {
    pub x_hat: Vec<f64>,
    pub omega_hat: Vec<Vec<f64>>,
    pub b_hat: Vec<f64>,
    pub objective_value: f64,
}

#[derive(Debug, Clone)]
pub struct RltmleResult {
    pub estimate: f64,
    pub solution: EnsembleSolution,
    pub bank: EstimatorBank,
    /// Per-base second-stage diagnostics from the original-data runs.
    pub fits: Vec<SecondStageFit>,
    pub qp: QpSolution,
}

#[allow(clippy::too_many_arguments)]
fn validate_ensemble_inputs(
    dataset: &Dataset,
    triples: &[RegularizationTriple],
    bootstrap_samples: usize,
    ci_level: f64,
) -> Result<()> {
    if triples.is_empty() {
        return Err(OpeError::Config("the regularization pool must be non-empty".into()));
    }
    let horizon = dataset.horizon;
    if !triples.last().unwrap().is_unregularized(horizon) {
        return Err(OpeError::Config(format!(
            "the last triple must be the unregularized (1, {horizon}, 0)"
        )));
    }
    if bootstrap_samples < 100 {
        return Err(OpeError::Config(format!(
            "need at least 100 bootstrap samples, got {bootstrap_samples}"
        )));
    }
    if !(0.0 < ci_level && ci_level < 1.0) {
        return Err(OpeError::Config(format!("ci_level must lie in (0,1), got {ci_level}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bank(
    dataset: &Dataset,
    q: &QStack,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
    triples: &[RegularizationTriple],
    config: &LtmleConfig,
) -> Result<Vec<LtmleFit>> {
    triples
        .iter()
        .map(|&reg| ltmle_backward(dataset, q, pi_e, pi_b, discount, reg, config))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish_ensemble(
    g: Vec<f64>,
    omega: Vec<Vec<f64>>,
    b_hat: Vec<f64>,
    triples: &[RegularizationTriple],
    fits: Vec<SecondStageFit>,
    per_trajectory_eifs: Option<Vec<Vec<f64>>>,
    bootstrap_values: Option<Vec<Vec<f64>>>,
) -> Result<RltmleResult> {
    let qp = solve_simplex_qp(&omega, &b_hat)?;
    let estimate = qp.x.iter().zip(&g).map(|(&x, &gk)| x * gk).sum();
    Ok(RltmleResult {
        estimate,
        solution: EnsembleSolution {
            x_hat: qp.x.clone(),
            omega_hat: omega,
            b_hat,
            objective_value: qp.objective,
        },
        bank: EstimatorBank {
            triples: triples.to_vec(),
            g,
            per_trajectory_eifs,
            bootstrap_values,
        },
        fits,
        qp,
    })
}

/// Bootstrap-covariance ensemble: runs the backward targeting pass for every
/// `(replicate, triple)` pair, estimates the covariance across replicates
/// and each base estimator's bias as its distance to the percentile
/// confidence interval of the unregularized estimator's replicates, then
/// blends with the simplex QP weights.
#[allow(clippy::too_many_arguments)]
pub fn rltmle2(
    dataset: &Dataset,
    q: &QStack,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
    triples: &[RegularizationTriple],
    bootstrap_samples: usize,
    ci_level: f64,
    config: &LtmleConfig,
    seed: u64,
) -> Result<RltmleResult> {
    validate_ensemble_inputs(dataset, triples, bootstrap_samples, ci_level)?;
    let fits = run_bank(dataset, q, pi_e, pi_b, discount, triples, config)?;
    let g: Vec<f64> = fits.iter().map(|f| f.estimate).collect();
    let n = dataset.len();
    let bootstrap_values: Vec<Vec<f64>> = (0..bootstrap_samples)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let idx = resample_indices(n, derive_seed(seed, &[streams::BOOTSTRAP, k as u64]));
            let replicate = dataset.subset(&idx);
            run_bank(&replicate, q, pi_e, pi_b, discount, triples, config)
                .map(|fits| fits.into_iter().map(|f| f.estimate).collect())
        })
        .collect::<Result<_>>()?;
    let omega = covariance_bootstrap(&bootstrap_values)?;
    let anchor: Vec<f64> = bootstrap_values.iter().map(|row| *row.last().unwrap()).collect();
    let b_hat = bias_estimates(&g, &anchor, ci_level)?;
    let fit_diags = fits.iter().map(|f| f.fit.clone()).collect();
    finish_ensemble(g, omega, b_hat, triples, fit_diags, None, Some(bootstrap_values))
}

/// Influence-covariance ensemble: the covariance of the bank comes from the
/// per-trajectory influence values of the original-data runs; the bias
/// estimate still bootstraps the unregularized estimator.
#[allow(clippy::too_many_arguments)]
pub fn rltmle1(
    dataset: &Dataset,
    q: &QStack,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    discount: DiscountSpec,
    triples: &[RegularizationTriple],
    bootstrap_samples: usize,
    ci_level: f64,
    config: &LtmleConfig,
    seed: u64,
) -> Result<RltmleResult> {
    validate_ensemble_inputs(dataset, triples, bootstrap_samples, ci_level)?;
    let fits = run_bank(dataset, q, pi_e, pi_b, discount, triples, config)?;
    let g: Vec<f64> = fits.iter().map(|f| f.estimate).collect();
    let n = dataset.len();
    let eif_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| fits.iter().map(|f| f.eif_values[i]).collect())
        .collect();
    let omega = covariance_eif(&eif_rows)?;
    let unregularized = *triples.last().unwrap();
    let anchor: Vec<f64> = (0..bootstrap_samples)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let idx = resample_indices(n, derive_seed(seed, &[streams::BOOTSTRAP, k as u64]));
            let replicate = dataset.subset(&idx);
            ltmle_backward(&replicate, q, pi_e, pi_b, discount, unregularized, config)
                .map(|f| f.estimate)
        })
        .collect::<Result<_>>()?;
    let b_hat = bias_estimates(&g, &anchor, ci_level)?;
    let fit_diags = fits.iter().map(|f| f.fit.clone()).collect();
    finish_ensemble(g, omega, b_hat, triples, fit_diags, Some(eif_rows), None)
}
