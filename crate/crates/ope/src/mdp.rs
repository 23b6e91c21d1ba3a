//! Core MDP data model: tabular dynamics, stochastic policies, logged
//! trajectories, simulation, importance ratios, discounted returns, and the
//! exact dynamic-programming oracles used as ground truth everywhere else.
//!
//! Conventions fixed here and shared by every estimator in the crate:
//!
//! * Time steps are 1-based, `t = 1..=T`.
//! * The discount weight of the reward at step `t` is `gamma^(t-1)`: the
//!   first reward is undiscounted.
//! * Cumulative importance ratios use `rho_{1:0} = 1`.
//! * Episodes that reach a terminal state before the horizon are padded by
//!   the absorbing dynamics of the terminal state itself (zero-reward
//!   self-loop), so every trajectory has exactly `T` steps.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::model::{delta_bounds, QStack};

pub type StateId = usize;
pub type ObsId = usize;
pub type ActionId = usize;

/// Tolerance for "probabilities sum to one" checks.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// One outcome of taking an action in a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next_state: StateId,
    pub reward: f64,
    pub probability: f64,
}

/// A finite-horizon tabular MDP with a fixed initial state, declared reward
/// bounds, and an observation map (identity for fully observed domains,
/// many-to-one for aliased ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDto", into = "MdpDto")]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transitions[s][a]` lists the possible `(next_state, reward, prob)`
    /// outcomes of taking action `a` in state `s`.
    pub transitions: Vec<Vec<Vec<Outcome>>>,
    pub initial_state: StateId,
    /// Declared `(r_min, r_max)`; every reward in `transitions` lies inside.
    pub reward_bounds: (f64, f64),
    /// `observation_map[s]` is the observation index emitted in state `s`.
    pub observation_map: Vec<ObsId>,
    /// States whose rows are absorbing zero-reward self-loops.
    pub terminal_states: Vec<StateId>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<Vec<Vec<Outcome>>>,
        initial_state: StateId,
        reward_bounds: (f64, f64),
        observation_map: Vec<ObsId>,
        terminal_states: Vec<StateId>,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            num_states,
            num_actions,
            transitions,
            initial_state,
            reward_bounds,
            observation_map,
            terminal_states,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(OpeError::Invariant("MDP needs at least one state and action".into()));
        }
        if self.initial_state >= self.num_states {
            return Err(OpeError::Invariant("initial state out of range".into()));
        }
        if self.transitions.len() != self.num_states {
            return Err(OpeError::Invariant("transition table must cover every state".into()));
        }
        if self.observation_map.len() != self.num_states {
            return Err(OpeError::Invariant("observation map must be total over states".into()));
        }
        let (r_min, r_max) = self.reward_bounds;
        if !(r_min <= r_max) {
            return Err(OpeError::Invariant("reward bounds must satisfy r_min <= r_max".into()));
        }
        for (s, rows) in self.transitions.iter().enumerate() {
            if rows.len() != self.num_actions {
                return Err(OpeError::Invariant(format!(
                    "state {s} must have one outcome list per action"
                )));
            }
            for (a, outcomes) in rows.iter().enumerate() {
                if outcomes.is_empty() {
                    return Err(OpeError::Invariant(format!(
                        "empty outcome list for state {s}, action {a}"
                    )));
                }
                let mut total = 0.0;
                for o in outcomes {
                    if o.next_state >= self.num_states {
                        return Err(OpeError::Invariant(format!(
                            "next state {} out of range at ({s},{a})",
                            o.next_state
                        )));
                    }
                    if !(0.0..=1.0).contains(&o.probability) {
                        return Err(OpeError::Invariant(format!(
                            "probability {} out of [0,1] at ({s},{a})",
                            o.probability
                        )));
                    }
                    if o.reward < r_min - PROB_SUM_TOL || o.reward > r_max + PROB_SUM_TOL {
                        return Err(OpeError::Invariant(format!(
                            "reward {} outside declared bounds [{r_min},{r_max}] at ({s},{a})",
                            o.reward
                        )));
                    }
                    total += o.probability;
                }
                if (total - 1.0).abs() > PROB_SUM_TOL {
                    return Err(OpeError::Invariant(format!(
                        "outgoing probabilities at ({s},{a}) sum to {total}, not 1"
                    )));
                }
            }
        }
        for &s in &self.terminal_states {
            if s >= self.num_states {
                return Err(OpeError::Invariant("terminal state out of range".into()));
            }
        }
        Ok(())
    }

    pub fn num_observations(&self) -> usize {
        self.observation_map.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn obs(&self, state: StateId) -> ObsId {
        self.observation_map[state]
    }
}

#[derive(Serialize, Deserialize)]
struct TransitionTriple {
    state: StateId,
    action: ActionId,
    next_state: StateId,
    reward: f64,
    probability: f64,
}

/// Wire form of [`TabularMdp`]: sparse transition triples.
#[derive(Serialize, Deserialize)]
struct MdpDto {
    num_states: usize,
    num_actions: usize,
    initial_state: StateId,
    reward_bounds: (f64, f64),
    observation_map: Vec<ObsId>,
    #[serde(default)]
    terminal_states: Vec<StateId>,
    transitions: Vec<TransitionTriple>,
}

impl From<TabularMdp> for MdpDto {
    fn from(m: TabularMdp) -> Self {
        let mut triples = Vec::new();
        for (s, rows) in m.transitions.iter().enumerate() {
            for (a, outcomes) in rows.iter().enumerate() {
                for o in outcomes {
                    triples.push(TransitionTriple {
                        state: s,
                        action: a,
                        next_state: o.next_state,
                        reward: o.reward,
                        probability: o.probability,
                    });
                }
            }
        }
        MdpDto {
            num_states: m.num_states,
            num_actions: m.num_actions,
            initial_state: m.initial_state,
            reward_bounds: m.reward_bounds,
            observation_map: m.observation_map,
            terminal_states: m.terminal_states,
            transitions: triples,
        }
    }
}

impl TryFrom<MdpDto> for TabularMdp {
    type Error = OpeError;

    fn try_from(dto: MdpDto) -> Result<Self> {
        let mut transitions = vec![vec![Vec::new(); dto.num_actions]; dto.num_states];
        for t in dto.transitions {
            if t.state >= dto.num_states || t.action >= dto.num_actions {
                return Err(OpeError::Parse(format!(
                    "transition triple ({},{}) out of range",
                    t.state, t.action
                )));
            }
            transitions[t.state][t.action].push(Outcome {
                next_state: t.next_state,
                reward: t.reward,
                probability: t.probability,
            });
        }
        TabularMdp::new(
            dto.num_states,
            dto.num_actions,
            transitions,
            dto.initial_state,
            dto.reward_bounds,
            dto.observation_map,
            dto.terminal_states,
        )
    }
}

/// A (possibly time-varying) stochastic policy over observations.
///
/// Stationary policies hold a single table reused at every step; time-varying
/// policies hold one table per step `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDto", into = "PolicyDto")]
pub struct StochasticPolicy {
    /// `tables[k][obs][action]`; `k` is `t - 1` for time-varying policies and
    /// always 0 for stationary ones.
    tables: Vec<Vec<Vec<f64>>>,
}

impl StochasticPolicy {
    /// A stationary policy from one `obs -> action` distribution table.
    pub fn stationary(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_tables(vec![rows])
    }

    /// A time-varying policy, one table per step.
    pub fn time_varying(tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Self::from_tables(tables)
    }

    /// Uniform stationary policy.
    pub fn uniform(num_observations: usize, num_actions: usize) -> Self {
        let row = vec![1.0 / num_actions as f64; num_actions];
        StochasticPolicy { tables: vec![vec![row; num_observations]] }
    }

    fn from_tables(tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if tables.is_empty() || tables[0].is_empty() {
            return Err(OpeError::Invariant("policy needs at least one row".into()));
        }
        let num_obs = tables[0].len();
        let num_actions = tables[0][0].len();
        for table in &tables {
            if table.len() != num_obs {
                return Err(OpeError::Invariant("policy tables differ in observation count".into()));
            }
            for row in table {
                if row.len() != num_actions {
                    return Err(OpeError::Invariant("policy rows differ in action count".into()));
                }
                let mut total = 0.0;
                for &p in row {
                    if !(0.0..=1.0 + PROB_SUM_TOL).contains(&p) {
                        return Err(OpeError::Invariant(format!(
                            "policy probability {p} out of [0,1]"
                        )));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > PROB_SUM_TOL {
                    return Err(OpeError::Invariant(format!(
                        "policy row sums to {total}, not 1"
                    )));
                }
            }
        }
        Ok(StochasticPolicy { tables })
    }

    pub fn is_stationary(&self) -> bool {
        self.tables.len() == 1
    }

    pub fn num_observations(&self) -> usize {
        self.tables[0].len()
    }

    pub fn num_actions(&self) -> usize {
        self.tables[0][0].len()
    }

    /// Action distribution at 1-based step `t` and observation `obs`.
    pub fn row(&self, t: usize, obs: ObsId) -> &[f64] {
        let k = if self.tables.len() == 1 { 0 } else { t - 1 };
        &self.tables[k][obs]
    }

    /// `pi(action | obs)` at 1-based step `t`.
    pub fn prob(&self, t: usize, obs: ObsId, action: ActionId) -> f64 {
        self.row(t, obs)[action]
    }

    /// Checks the policy covers the given horizon / observation / action space.
    pub fn covers(&self, horizon: usize, num_obs: usize, num_actions: usize) -> bool {
        (self.tables.len() == 1 || self.tables.len() >= horizon)
            && self.num_observations() >= num_obs
            && self.num_actions() == num_actions
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDto {
    num_observations: usize,
    num_actions: usize,
    /// One table for stationary policies, `T` tables otherwise.
    tables: Vec<Vec<Vec<f64>>>,
}

impl From<StochasticPolicy> for PolicyDto {
    fn from(p: StochasticPolicy) -> Self {
        PolicyDto {
            num_observations: p.num_observations(),
            num_actions: p.num_actions(),
            tables: p.tables,
        }
    }
}

impl TryFrom<PolicyDto> for StochasticPolicy {
    type Error = OpeError;

    fn try_from(dto: PolicyDto) -> Result<Self> {
        let p = StochasticPolicy::from_tables(dto.tables)?;
        if p.num_observations() != dto.num_observations || p.num_actions() != dto.num_actions {
            return Err(OpeError::Parse("policy dims disagree with declared shape".into()));
        }
        Ok(p)
    }
}

/// Discounting convention: the reward at step `t` carries weight
/// `gamma^(t-1)`, i.e. the exponent offset is fixed at `t - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountSpec {
    pub gamma: f64,
}

impl DiscountSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma <= 1.0 {
            Ok(DiscountSpec { gamma })
        } else {
            Err(OpeError::Config(format!("gamma must lie in (0,1], got {gamma}")))
        }
    }

    /// Discount weight `gamma^(t-1)` of the reward at 1-based step `t`.
    pub fn weight(&self, t: usize) -> f64 {
        self.gamma.powi(t as i32 - 1)
    }
}

impl Default for DiscountSpec {
    fn default() -> Self {
        DiscountSpec { gamma: 1.0 }
    }
}

/// One step of a logged trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub action: ActionId,
    pub reward: f64,
}

/// One logged episode of exactly `T` `(state, action, reward)` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// The step at 1-based time `t`.
    pub fn step(&self, t: usize) -> &Step {
        &self.steps[t - 1]
    }
}

/// A batch of logged trajectories together with the context they were
/// generated in: shared horizon, observation space, declared reward bounds,
/// and the behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub horizon: usize,
    pub num_observations: usize,
    pub num_actions: usize,
    pub observation_map: Vec<ObsId>,
    pub reward_bounds: (f64, f64),
    pub behavior: StochasticPolicy,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Observation emitted by `state`.
    pub fn obs_of(&self, state: StateId) -> ObsId {
        self.observation_map[state]
    }

    /// Observation of the shared initial state.
    pub fn initial_obs(&self) -> Result<ObsId> {
        let traj = self
            .trajectories
            .first()
            .ok_or_else(|| OpeError::Config("empty dataset".into()))?;
        Ok(self.obs_of(traj.steps[0].state))
    }

    pub fn validate(&self) -> Result<()> {
        let (r_min, r_max) = self.reward_bounds;
        let first_state = self.trajectories.first().map(|t| t.steps[0].state);
        for traj in &self.trajectories {
            if traj.horizon() != self.horizon {
                return Err(OpeError::Invariant("trajectory length differs from horizon".into()));
            }
            if Some(traj.steps[0].state) != first_state {
                return Err(OpeError::Invariant("trajectories disagree on the initial state".into()));
            }
            for step in &traj.steps {
                if step.state >= self.observation_map.len() {
                    return Err(OpeError::Invariant("state index out of range".into()));
                }
                if self.observation_map[step.state] >= self.num_observations {
                    return Err(OpeError::Invariant("observation index out of range".into()));
                }
                if step.action >= self.num_actions {
                    return Err(OpeError::Invariant("action index out of range".into()));
                }
                if step.reward < r_min - PROB_SUM_TOL || step.reward > r_max + PROB_SUM_TOL {
                    return Err(OpeError::Invariant("reward outside declared bounds".into()));
                }
            }
        }
        Ok(())
    }

    /// A new dataset holding `indices`-selected trajectories (with
    /// repetition allowed, as in bootstrap resampling).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            ..self.clone_context()
        }
    }

    /// Splits into `(model_split, targeting_split)` where the targeting split
    /// holds the trailing `round(p * n)` trajectories (clamped so both sides
    /// are non-empty).
    pub fn split_targeting(&self, p: f64) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        if n < 2 {
            return Err(OpeError::Config(format!(
                "cannot split {n} trajectories into two non-empty halves"
            )));
        }
        if !(0.0 < p && p < 1.0) {
            return Err(OpeError::Config(format!("split fraction must lie in (0,1), got {p}")));
        }
        let n_target = ((p * n as f64).round() as usize).clamp(1, n - 1);
        let cut = n - n_target;
        let model = Dataset {
            trajectories: self.trajectories[..cut].to_vec(),
            ..self.clone_context()
        };
        let target = Dataset {
            trajectories: self.trajectories[cut..].to_vec(),
            ..self.clone_context()
        };
        Ok((model, target))
    }

    fn clone_context(&self) -> Dataset {
        Dataset {
            trajectories: Vec::new(),
            horizon: self.horizon,
            num_observations: self.num_observations,
            num_actions: self.num_actions,
            observation_map: self.observation_map.clone(),
            reward_bounds: self.reward_bounds,
            behavior: self.behavior.clone(),
            seed: self.seed,
        }
    }

    /// Exports as JSON lines: a header object carrying the generation
    /// context, then one trajectory object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = DatasetHeader {
            kind: "dataset".into(),
            horizon: self.horizon,
            num_observations: self.num_observations,
            num_actions: self.num_actions,
            observation_map: self.observation_map.clone(),
            reward_bounds: self.reward_bounds,
            behavior: self.behavior.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for traj in &self.trajectories {
            out.push_str(&serde_json::to_string(traj)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses the JSON-lines format written by [`Dataset::to_jsonl`] and
    /// validates the result.
    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line =
            lines.next().ok_or_else(|| OpeError::Parse("empty dataset file".into()))?;
        let header: DatasetHeader = serde_json::from_str(header_line)?;
        if header.kind != "dataset" {
            return Err(OpeError::Parse(format!("unexpected header kind '{}'", header.kind)));
        }
        let trajectories: Vec<Trajectory> = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: serde_json::Error| OpeError::Parse(e.to_string()))?;
        let dataset = Dataset {
            trajectories,
            horizon: header.horizon,
            num_observations: header.num_observations,
            num_actions: header.num_actions,
            observation_map: header.observation_map,
            reward_bounds: header.reward_bounds,
            behavior: header.behavior,
            seed: header.seed,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    kind: String,
    horizon: usize,
    num_observations: usize,
    num_actions: usize,
    observation_map: Vec<ObsId>,
    reward_bounds: (f64, f64),
    behavior: StochasticPolicy,
    seed: u64,
}

fn sample_from<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64> + Clone, len: usize) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    len - 1
}

/// Simulates `n` trajectories of length `horizon` under `policy`.
///
/// Actions are drawn from the policy applied to the observation of the
/// current state. The result is a pure function of the arguments; the same
/// seed yields a bit-identical dataset.
pub fn simulate(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if horizon == 0 {
        return Err(OpeError::Config("horizon must be at least 1".into()));
    }
    let num_obs = mdp.num_observations();
    if !policy.covers(horizon, num_obs, mdp.num_actions) {
        return Err(OpeError::Config(format!(
            "policy over {} observations x {} actions does not match MDP with {} observations x {} actions over horizon {}",
            policy.num_observations(),
            policy.num_actions(),
            num_obs,
            mdp.num_actions,
            horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let mut steps = Vec::with_capacity(horizon);
        let mut state = mdp.initial_state;
        for t in 1..=horizon {
            let obs = mdp.obs(state);
            let row = policy.row(t, obs);
            let action = sample_from(&mut rng, row.iter().copied(), row.len());
            let outcomes = &mdp.transitions[state][action];
            let k = sample_from(&mut rng, outcomes.iter().map(|o| o.probability), outcomes.len());
            let outcome = outcomes[k];
            steps.push(Step { state, action, reward: outcome.reward });
            state = outcome.next_state;
        }
        trajectories.push(Trajectory { steps });
    }
    Ok(Dataset {
        trajectories,
        horizon,
        num_observations: num_obs,
        num_actions: mdp.num_actions,
        observation_map: mdp.observation_map.clone(),
        reward_bounds: mdp.reward_bounds,
        behavior: policy.clone(),
        seed,
    })
}

/// Cumulative importance ratios `rho_{1:t}` for `t = 1..=T`.
///
/// `rho_{1:t} = rho_{1:t-1} * pi_e(a_t|o_t) / pi_b(a_t|o_t)` with
/// `rho_{1:0} = 1`. Fails if the behavior policy puts zero probability on a
/// logged action (absolute-continuity violation).
pub fn importance_ratios(
    traj: &Trajectory,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    observation_map: &[ObsId],
) -> Result<Vec<f64>> {
    let mut ratios = Vec::with_capacity(traj.horizon());
    let mut acc = 1.0;
    for (idx, step) in traj.steps.iter().enumerate() {
        let t = idx + 1;
        let obs = observation_map[step.state];
        let pb = pi_b.prob(t, obs, step.action);
        if pb == 0.0 {
            return Err(OpeError::AbsoluteContinuity { t, obs, action: step.action });
        }
        acc *= pi_e.prob(t, obs, step.action) / pb;
        ratios.push(acc);
    }
    Ok(ratios)
}

/// Cumulative ratios for every trajectory in a dataset; `out[i][t-1]` is
/// `rho_{1:t}` for trajectory `i`.
pub fn cumulative_ratios(
    dataset: &Dataset,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
) -> Result<Vec<Vec<f64>>> {
    for (label, pi) in [("evaluation", pi_e), ("behavior", pi_b)] {
        if !pi.covers(dataset.horizon, dataset.num_observations, dataset.num_actions) {
            return Err(OpeError::Config(format!(
                "{label} policy does not cover the dataset's observation/action space"
            )));
        }
    }
    dataset
        .trajectories
        .iter()
        .map(|traj| importance_ratios(traj, pi_e, pi_b, &dataset.observation_map))
        .collect()
}

/// Discounted reward-to-go from 1-based step `t`:
/// `sum_{tau=t}^T gamma^(tau-t) R_tau`.
pub fn return_to_go(traj: &Trajectory, t: usize, discount: DiscountSpec) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for step in &traj.steps[t - 1..] {
        total += weight * step.reward;
        weight *= discount.gamma;
    }
    total
}

/// Exact `V_1(s_1)` of `policy` by finite-horizon backward induction on the
/// true model. This is the oracle all squared errors are measured against.
pub fn exact_policy_value(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    horizon: usize,
    discount: DiscountSpec,
) -> Result<f64> {
    let values = exact_state_values(mdp, policy, horizon, discount)?;
    Ok(values[mdp.initial_state])
}

fn exact_state_values(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    horizon: usize,
    discount: DiscountSpec,
) -> Result<Vec<f64>> {
    if !policy.covers(horizon, mdp.num_observations(), mdp.num_actions) {
        return Err(OpeError::Config("policy does not cover the MDP's observation space".into()));
    }
    let mut v_next = vec![0.0; mdp.num_states];
    let mut v = vec![0.0; mdp.num_states];
    for t in (1..=horizon).rev() {
        for s in 0..mdp.num_states {
            let obs = mdp.obs(s);
            let mut value = 0.0;
            for (a, &pa) in policy.row(t, obs).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let q: f64 = mdp.transitions[s][a]
                    .iter()
                    .map(|o| o.probability * (o.reward + discount.gamma * v_next[o.next_state]))
                    .sum();
                value += pa * q;
            }
            v[s] = value;
        }
        std::mem::swap(&mut v, &mut v_next);
    }
    Ok(v_next)
}

/// Exact per-step action-value functions `Q_t` of `policy` under the true
/// model, as a [`QStack`] indexed by state.
///
/// The tables coincide with observation-indexed tables exactly when the
/// observation map is the identity, which is the only case in which the
/// result is a valid initial estimator for the estimators in this crate.
pub fn exact_q_functions(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    horizon: usize,
    discount: DiscountSpec,
) -> Result<QStack> {
    if !policy.covers(horizon, mdp.num_observations(), mdp.num_actions) {
        return Err(OpeError::Config("policy does not cover the MDP's observation space".into()));
    }
    let mut q_tables = vec![Vec::new(); horizon];
    let mut v_next = vec![0.0; mdp.num_states];
    for t in (1..=horizon).rev() {
        let mut q_t = vec![vec![0.0; mdp.num_actions]; mdp.num_states];
        let mut v_t = vec![0.0; mdp.num_states];
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                q_t[s][a] = mdp.transitions[s][a]
                    .iter()
                    .map(|o| o.probability * (o.reward + discount.gamma * v_next[o.next_state]))
                    .sum();
            }
            let obs = mdp.obs(s);
            v_t[s] = policy
                .row(t, obs)
                .iter()
                .zip(&q_t[s])
                .map(|(&pa, &q)| pa * q)
                .sum();
        }
        q_tables[t - 1] = q_t;
        v_next = v_t;
    }
    Ok(QStack {
        q: q_tables,
        delta: delta_bounds(mdp.reward_bounds, discount.gamma, horizon),
        discount,
    })
}
