//! Initial estimators: fit an empirical model of the dynamics over
//! observations, derive per-step action-value tables from it by backward
//! induction, and optionally inject controlled misspecification noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::mdp::{ActionId, Dataset, DiscountSpec, ObsId, StochasticPolicy};
use crate::seeding::{derive_seed, streams};

/// Range bounds `Delta_t = max(|r_min|, r_max) + gamma * Delta_{t+1}` with
/// `Delta_{T+1} = 0`, i.e. the attainable magnitude of the reward-to-go from
/// step `t`. Returned as `[Delta_1, ..., Delta_T]`.
pub fn delta_bounds(reward_bounds: (f64, f64), gamma: f64, horizon: usize) -> Vec<f64> {
    let per_step = reward_bounds.0.abs().max(reward_bounds.1.abs());
    let mut delta = vec![0.0; horizon];
    let mut next = 0.0;
    for t in (0..horizon).rev() {
        next = per_step + gamma * next;
        delta[t] = next;
    }
    delta
}

/// Per-step action-value tables `Q_1..Q_T` with their range bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStack {
    /// `q[t-1][obs][action]`.
    pub q: Vec<Vec<Vec<f64>>>,
    /// `delta[t-1] = Delta_t`.
    pub delta: Vec<f64>,
    pub discount: DiscountSpec,
}

impl QStack {
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn num_observations(&self) -> usize {
        self.q.first().map_or(0, |t| t.len())
    }

    pub fn num_actions(&self) -> usize {
        self.q.first().and_then(|t| t.first()).map_or(0, |row| row.len())
    }

    /// Checks `|q| <= Delta_t` entrywise (up to rounding slack).
    pub fn validate(&self) -> Result<()> {
        if self.delta.len() != self.q.len() {
            return Err(OpeError::Invariant("delta list must match the number of steps".into()));
        }
        for (t, table) in self.q.iter().enumerate() {
            let bound = self.delta[t] + 1e-9 * (1.0 + self.delta[t]);
            for row in table {
                for &v in row {
                    if !v.is_finite() || v.abs() > bound {
                        return Err(OpeError::Invariant(format!(
                            "Q entry {v} exceeds range bound {} at step {}",
                            self.delta[t],
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Count-based maximum-likelihood model of the dynamics over observations,
/// with additive smoothing on transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalModel {
    pub num_observations: usize,
    pub num_actions: usize,
    /// `transition_counts[o][a][o']`, counted over steps `t < T`.
    pub transition_counts: Vec<Vec<Vec<f64>>>,
    /// `reward_sums[o][a]` over all steps.
    pub reward_sums: Vec<Vec<f64>>,
    /// `visit_counts[o][a]` over all steps.
    pub visit_counts: Vec<Vec<f64>>,
    pub smoothing: f64,
    pub reward_bounds: (f64, f64),
}

impl EmpiricalModel {
    /// Estimated next-observation distribution for `(o, a)`:
    /// `(count + lambda) / (total + lambda * |O|)`; uniform when the pair has
    /// no observed transitions and no smoothing.
    pub fn transition_probs(&self, o: ObsId, a: ActionId) -> Vec<f64> {
        let counts = &self.transition_counts[o][a];
        let total: f64 = counts.iter().sum();
        let denom = total + self.smoothing * self.num_observations as f64;
        if denom == 0.0 {
            return vec![1.0 / self.num_observations as f64; self.num_observations];
        }
        counts.iter().map(|&c| (c + self.smoothing) / denom).collect()
    }

    /// Estimated mean reward for `(o, a)`, clipped to the declared bounds;
    /// zero for unseen pairs.
    pub fn mean_reward(&self, o: ObsId, a: ActionId) -> f64 {
        let visits = self.visit_counts[o][a];
        if visits == 0.0 {
            return 0.0;
        }
        (self.reward_sums[o][a] / visits).clamp(self.reward_bounds.0, self.reward_bounds.1)
    }
}

/// Fits an [`EmpiricalModel`] on the logged data, aggregating by observation
/// through `observation_map`.
pub fn fit_empirical_model(
    dataset: &Dataset,
    observation_map: &[ObsId],
    smoothing: f64,
) -> Result<EmpiricalModel> {
    if dataset.is_empty() {
        return Err(OpeError::Config("cannot fit a model on an empty dataset".into()));
    }
    if smoothing < 0.0 {
        return Err(OpeError::Config("smoothing must be non-negative".into()));
    }
    let num_obs = observation_map.iter().copied().max().map_or(0, |m| m + 1);
    let num_actions = dataset.num_actions;
    let mut transition_counts = vec![vec![vec![0.0; num_obs]; num_actions]; num_obs];
    let mut reward_sums = vec![vec![0.0; num_actions]; num_obs];
    let mut visit_counts = vec![vec![0.0; num_actions]; num_obs];
    for traj in &dataset.trajectories {
        for (idx, step) in traj.steps.iter().enumerate() {
            let o = observation_map[step.state];
            reward_sums[o][step.action] += step.reward;
            visit_counts[o][step.action] += 1.0;
            if let Some(next) = traj.steps.get(idx + 1) {
                let o2 = observation_map[next.state];
                transition_counts[o][step.action][o2] += 1.0;
            }
        }
    }
    Ok(EmpiricalModel {
        num_observations: num_obs,
        num_actions,
        transition_counts,
        reward_sums,
        visit_counts,
        smoothing,
        reward_bounds: dataset.reward_bounds,
    })
}

/// Backward induction over the fitted model under `pi_e`:
/// `Q_t(o,a) = r(o,a) + gamma * sum_{o'} P(o'|o,a) V_{t+1}(o')` with
/// `V_t(o) = sum_a pi_e(a|o) Q_t(o,a)` and `V_{T+1} = 0`.
pub fn q_from_model(
    model: &EmpiricalModel,
    pi_e: &StochasticPolicy,
    horizon: usize,
    discount: DiscountSpec,
) -> Result<QStack> {
    if !pi_e.covers(horizon, model.num_observations, model.num_actions) {
        return Err(OpeError::Config("policy does not cover the model's observation space".into()));
    }
    let delta = delta_bounds(model.reward_bounds, discount.gamma, horizon);
    let mut q_tables = vec![Vec::new(); horizon];
    let mut v_next = vec![0.0; model.num_observations];
    for t in (1..=horizon).rev() {
        let bound = delta[t - 1];
        let mut q_t = vec![vec![0.0; model.num_actions]; model.num_observations];
        let mut v_t = vec![0.0; model.num_observations];
        for o in 0..model.num_observations {
            for a in 0..model.num_actions {
                let mut q = model.mean_reward(o, a);
                if t < horizon {
                    let probs = model.transition_probs(o, a);
                    let future: f64 =
                        probs.iter().zip(&v_next).map(|(&p, &v)| p * v).sum();
                    q += discount.gamma * future;
                }
                q_t[o][a] = q.clamp(-bound, bound);
            }
            v_t[o] = pi_e
                .row(t, o)
                .iter()
                .zip(&q_t[o])
                .map(|(&p, &q)| p * q)
                .sum();
        }
        q_tables[t - 1] = q_t;
        v_next = v_t;
    }
    Ok(QStack { q: q_tables, delta, discount })
}

/// State-value tables under `pi_e`: `v[t-1][obs] = sum_a pi_e(a|obs) q[t-1][obs][a]`.
pub fn value_tables(q: &QStack, pi_e: &StochasticPolicy) -> Vec<Vec<f64>> {
    q.q.iter()
        .enumerate()
        .map(|(idx, table)| {
            let t = idx + 1;
            table
                .iter()
                .enumerate()
                .map(|(obs, row)| {
                    pi_e.row(t, obs).iter().zip(row).map(|(&p, &qv)| p * qv).sum()
                })
                .collect()
        })
        .collect()
}

/// Adds one `scale * Normal(0,1)` draw to every `(t, obs, action)` entry,
/// re-clipping to `[-Delta_t, Delta_t]`. The perturbation is a deterministic
/// function of `seed` and is held fixed for the lifetime of the returned
/// stack, which is how a trial's misspecification level is realized.
pub fn inject_bias(q: &QStack, scale: f64, seed: u64) -> Result<QStack> {
    if scale < 0.0 {
        return Err(OpeError::Config("misspecification scale must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[streams::INJECT]));
    let mut out = q.clone();
    for (t, table) in out.q.iter_mut().enumerate() {
        let bound = out.delta[t];
        for row in table.iter_mut() {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + scale * z).clamp(-bound, bound);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_modelwin;
    use crate::mdp::{simulate, exact_q_functions, Step, TabularMdp, Trajectory};

    fn chain_dataset(reward: f64, horizon: usize, n: usize) -> Dataset {
        let steps: Vec<Step> =
            (0..horizon).map(|_| Step { state: 0, action: 0, reward }).collect();
        Dataset {
            trajectories: vec![Trajectory { steps }; n],
            horizon,
            num_observations: 1,
            num_actions: 1,
            observation_map: vec![0],
            reward_bounds: (-1.0, 1.0),
            behavior: StochasticPolicy::uniform(1, 1),
            seed: 0,
        }
    }

    #[test]
    fn delta_recursion_matches_closed_form() {
        let delta = delta_bounds((-1.0, 1.0), 0.5, 4);
        // Delta_t = sum_{tau=t}^T gamma^(tau-t).
        assert!((delta[3] - 1.0).abs() < 1e-15);
        assert!((delta[2] - 1.5).abs() < 1e-15);
        assert!((delta[1] - 1.75).abs() < 1e-15);
        assert!((delta[0] - 1.875).abs() < 1e-15);
    }

    #[test]
    fn deterministic_pair_estimates_probability_one() {
        let ds = chain_dataset(0.5, 4, 3);
        let model = fit_empirical_model(&ds, &ds.observation_map, 0.0).unwrap();
        assert_eq!(model.transition_probs(0, 0), vec![1.0]);
        let smoothed = fit_empirical_model(&ds, &ds.observation_map, 0.5).unwrap();
        // count 9 transitions (3 trajectories x 3), |O| = 1.
        assert!((smoothed.transition_probs(0, 0)[0] - (9.0 + 0.5) / (9.0 + 0.5)).abs() < 1e-15);
        assert!((model.mean_reward(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn modelwin_transition_estimate_is_consistent() {
        let env = make_modelwin();
        let ds = simulate(&env.mdp, &env.behavior, env.default_horizon, 10_000, 21).unwrap();
        let model = fit_empirical_model(&ds, &ds.observation_map, 0.0).unwrap();
        let p = model.transition_probs(0, 0)[1]; // s1, a1 -> s2
        assert!((p - 0.4).abs() < 0.02, "estimated {p}");
    }

    #[test]
    fn true_model_reproduces_exact_q() {
        // Plant the true ModelWin frequencies as counts; with zero smoothing
        // the fitted model equals the true model over observations, so the
        // induced stack must match the exact DP stack.
        let env = make_modelwin();
        let horizon = 6;
        let disc = DiscountSpec::default();
        let mut model = EmpiricalModel {
            num_observations: 3,
            num_actions: 2,
            transition_counts: vec![vec![vec![0.0; 3]; 2]; 3],
            reward_sums: vec![vec![0.0; 2]; 3],
            visit_counts: vec![vec![0.0; 2]; 3],
            smoothing: 0.0,
            reward_bounds: env.mdp.reward_bounds,
        };
        for s in 0..3 {
            for a in 0..2 {
                for o in &env.mdp.transitions[s][a] {
                    model.transition_counts[s][a][o.next_state] += 1000.0 * o.probability;
                    model.reward_sums[s][a] += 1000.0 * o.probability * o.reward;
                }
                model.visit_counts[s][a] = 1000.0;
            }
        }
        let fitted = q_from_model(&model, &env.evaluation, horizon, disc).unwrap();
        let exact = exact_q_functions(&env.mdp, &env.evaluation, horizon, disc).unwrap();
        for t in 0..horizon {
            for s in 0..3 {
                for a in 0..2 {
                    assert!((fitted.q[t][s][a] - exact.q[t][s][a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chain_q_is_discounted_sum_of_estimated_reward() {
        let ds = chain_dataset(0.9, 5, 2);
        let model = fit_empirical_model(&ds, &ds.observation_map, 0.0).unwrap();
        let disc = DiscountSpec::new(0.5).unwrap();
        let stack = q_from_model(&model, &StochasticPolicy::uniform(1, 1), 5, disc).unwrap();
        for t in 1..=5usize {
            let expect: f64 = (t..=5).map(|tau| 0.5f64.powi((tau - t) as i32) * 0.9).sum();
            assert!((stack.q[t - 1][0][0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn fitted_model_q_matches_tree_enumeration() {
        let mdp = crate::mdp::tests::random_mdp(3, 2, 77);
        let pi = StochasticPolicy::stationary(vec![vec![0.3, 0.7]; 3]).unwrap();
        let ds = simulate(&mdp, &StochasticPolicy::uniform(3, 2), 4, 40, 3).unwrap();
        let model = fit_empirical_model(&ds, &ds.observation_map, 0.5).unwrap();
        let disc = DiscountSpec::new(0.9).unwrap();
        let horizon = 3;
        let stack = q_from_model(&model, &pi, horizon, disc).unwrap();

        // Independent oracle: enumerate all observation/action paths.
        fn enumerate(
            model: &EmpiricalModel,
            pi: &StochasticPolicy,
            disc: DiscountSpec,
            horizon: usize,
            t: usize,
            o: ObsId,
            a: ActionId,
        ) -> f64 {
            let mut value = model.mean_reward(o, a);
            if t < horizon {
                let probs = model.transition_probs(o, a);
                let mut future = 0.0;
                for (o2, &p) in probs.iter().enumerate() {
                    for (a2, &pa) in pi.row(t + 1, o2).iter().enumerate() {
                        future += p * pa * enumerate(model, pi, disc, horizon, t + 1, o2, a2);
                    }
                }
                value += disc.gamma * future;
            }
            value
        }

        for o in 0..3 {
            for a in 0..2 {
                let oracle = enumerate(&model, &pi, disc, horizon, 1, o, a);
                assert!((stack.q[0][o][a] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_makes_all_probabilities_positive() {
        let ds = chain_dataset(0.0, 3, 1);
        let mut model = fit_empirical_model(&ds, &ds.observation_map, 0.5).unwrap();
        model.num_observations = 1;
        for o in 0..model.num_observations {
            for a in 0..model.num_actions {
                for p in model.transition_probs(o, a) {
                    assert!(p > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_scale_injection_is_identity() {
        let env = make_modelwin();
        let stack = exact_q_functions(&env.mdp, &env.evaluation, 4, DiscountSpec::default()).unwrap();
        let out = inject_bias(&stack, 0.0, 99).unwrap();
        assert_eq!(stack, out);
    }

    #[test]
    fn injection_is_deterministic_in_the_seed() {
        let env = make_modelwin();
        let stack = exact_q_functions(&env.mdp, &env.evaluation, 4, DiscountSpec::default()).unwrap();
        let a = inject_bias(&stack, 0.05, 7).unwrap();
        let b = inject_bias(&stack, 0.05, 7).unwrap();
        assert_eq!(a, b);
        let c = inject_bias(&stack, 0.05, 8).unwrap();
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn injection_mean_absolute_perturbation_is_half_normal() {
        // E|scale * Z| = scale * sqrt(2/pi); use a large unclipped table.
        let horizon = 10;
        let table = vec![vec![vec![0.0; 10]; 50]; horizon];
        let stack = QStack {
            q: table,
            delta: vec![1e6; horizon],
            discount: DiscountSpec::default(),
        };
        let scale = 0.05;
        let out = inject_bias(&stack, scale, 5).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for t in 0..horizon {
            for o in 0..50 {
                for a in 0..10 {
                    total += out.q[t][o][a].abs();
                    count += 1.0;
                }
            }
        }
        let mean = total / count;
        let expect = scale * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expect).abs() < 0.1 * expect, "mean {mean} vs {expect}");
    }

    #[test]
    fn qstack_json_roundtrip() {
        let mdp: TabularMdp = crate::mdp::tests::random_mdp(2, 2, 3);
        let stack =
            exact_q_functions(&mdp, &StochasticPolicy::uniform(2, 2), 3, DiscountSpec::default())
                .unwrap();
        let text = serde_json::to_string(&stack).unwrap();
        let back: QStack = serde_json::from_str(&text).unwrap();
        assert_eq!(stack, back);
    }
}
