//! Shared fixtures for the integration suites: random MDP/policy generators
//! and the standard simulate/split/fit/inject pipeline.
#![allow(dead_code)] // each test binary uses a different subset

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ope::envs::EnvironmentSpec;
use ope::mdp::{simulate, Dataset, DiscountSpec, Outcome, StochasticPolicy, TabularMdp};
use ope::model::{fit_empirical_model, inject_bias, q_from_model, QStack};
use ope::Result;

/// Random fully-observed MDP. Rewards stay strictly inside the declared
/// `[-1, 1]` bounds so normalized tables never sit on the boundary.
pub fn random_mdp(num_states: usize, num_actions: usize, seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(num_states);
    for _ in 0..num_states {
        let mut rows = Vec::with_capacity(num_actions);
        for _ in 0..num_actions {
            let weights: Vec<f64> = (0..num_states).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = weights.iter().sum();
            let mut outcomes: Vec<Outcome> = weights
                .iter()
                .enumerate()
                .map(|(s2, w)| Outcome {
                    next_state: s2,
                    reward: rng.random::<f64>() * 1.6 - 0.8,
                    probability: w / total,
                })
                .collect();
            let sum: f64 = outcomes.iter().map(|o| o.probability).sum();
            outcomes.last_mut().unwrap().probability += 1.0 - sum;
            rows.push(outcomes);
        }
        transitions.push(rows);
    }
    TabularMdp::new(
        num_states,
        num_actions,
        transitions,
        0,
        (-1.0, 1.0),
        (0..num_states).collect(),
        vec![],
    )
    .unwrap()
}

/// Random stationary policy with every probability at least `floor`.
pub fn random_policy(
    num_obs: usize,
    num_actions: usize,
    floor: f64,
    seed: u64,
) -> StochasticPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..num_obs)
        .map(|_| {
            let raw: Vec<f64> = (0..num_actions).map(|_| rng.random::<f64>() + floor).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let sum: f64 = row.iter().sum();
            row[0] += 1.0 - sum;
            row
        })
        .collect();
    StochasticPolicy::stationary(rows).unwrap()
}

/// Simulate under the behavior policy, split, fit the model on the first
/// part, inject noise, and return `(full, targeting_split, q_hat)`.
pub fn pipeline(
    env: &EnvironmentSpec,
    horizon: usize,
    n: usize,
    scale: f64,
    smoothing: f64,
    discount: DiscountSpec,
    seed: u64,
) -> Result<(Dataset, Dataset, QStack)> {
    let full = simulate(&env.mdp, &env.behavior, horizon, n, seed)?;
    let (model_split, target) = full.split_targeting(0.5)?;
    let model = fit_empirical_model(&model_split, &model_split.observation_map, smoothing)?;
    let q = q_from_model(&model, &env.evaluation, horizon, discount)?;
    let q = inject_bias(&q, scale, seed ^ 0x5EED)?;
    Ok((full, target, q))
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
