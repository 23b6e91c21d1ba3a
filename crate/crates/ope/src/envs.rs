//! The three benchmark environments with their behavior and evaluation
//! policies: ModelWin (stochastic, fully observed), ModelFail (aliased
//! observations, so any observation-level model stays wrong), and a 4x4
//! GridWorld with an early-terminating goal state.

use crate::error::{OpeError, Result};
use crate::mdp::{Outcome, StateId, StochasticPolicy, TabularMdp};

/// A benchmark environment: MDP plus the pair of logging/target policies.
#[derive(Debug, Clone)]
pub struct EnvironmentSpec {
    pub name: String,
    pub mdp: TabularMdp,
    pub behavior: StochasticPolicy,
    pub evaluation: StochasticPolicy,
    pub default_horizon: usize,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        let num_obs = self.mdp.num_observations();
        for (label, policy) in [("behavior", &self.behavior), ("evaluation", &self.evaluation)] {
            if !policy.covers(self.default_horizon, num_obs, self.mdp.num_actions) {
                return Err(OpeError::Invariant(format!(
                    "{label} policy does not cover the environment's observation space"
                )));
            }
        }
        // Absolute continuity: wherever the evaluation policy has mass, the
        // behavior policy must too.
        for t in 1..=self.default_horizon {
            for obs in 0..num_obs {
                for a in 0..self.mdp.num_actions {
                    if self.evaluation.prob(t, obs, a) > 0.0 && self.behavior.prob(t, obs, a) == 0.0 {
                        return Err(OpeError::Invariant(format!(
                            "absolute continuity fails at obs {obs}, action {a}"
                        )));
                    }
                }
            }
            if self.behavior.is_stationary() && self.evaluation.is_stationary() {
                break;
            }
        }
        Ok(())
    }
}

/// Registered CLI names.
pub const ENV_NAMES: [&str; 3] = ["modelwin", "modelfail", "gridworld"];

/// Builds an environment by its registered name.
pub fn env_by_name(name: &str) -> Result<EnvironmentSpec> {
    match name {
        "modelwin" => Ok(make_modelwin()),
        "modelfail" => Ok(make_modelfail()),
        "gridworld" => Ok(make_gridworld()),
        other => Err(OpeError::Config(format!(
            "unknown environment '{other}'; known: {}",
            ENV_NAMES.join(", ")
        ))),
    }
}

/// ModelWin: three states. From `s1`, action `a1` moves to `s2` with
/// probability 0.4 (reward +1) and to `s3` with probability 0.6 (reward -1);
/// `a2` mirrors the probabilities. Both actions return from `s2`/`s3` to
/// `s1` with reward 0. The logger prefers `a1` at `s1` with probability
/// 0.73, the target policy with 0.27; both are uniform at `s2` and `s3`.
pub fn make_modelwin() -> EnvironmentSpec {
    let go = |p2: f64| {
        vec![
            Outcome { next_state: 1, reward: 1.0, probability: p2 },
            Outcome { next_state: 2, reward: -1.0, probability: 1.0 - p2 },
        ]
    };
    let back = vec![Outcome { next_state: 0, reward: 0.0, probability: 1.0 }];
    let transitions = vec![
        vec![go(0.4), go(0.6)],
        vec![back.clone(), back.clone()],
        vec![back.clone(), back],
    ];
    let mdp = TabularMdp::new(3, 2, transitions, 0, (-1.0, 1.0), vec![0, 1, 2], vec![])
        .expect("modelwin construction");
    let behavior = StochasticPolicy::stationary(vec![
        vec![0.73, 0.27],
        vec![0.5, 0.5],
        vec![0.5, 0.5],
    ])
    .expect("modelwin behavior");
    let evaluation = StochasticPolicy::stationary(vec![
        vec![0.27, 0.73],
        vec![0.5, 0.5],
        vec![0.5, 0.5],
    ])
    .expect("modelwin evaluation");
    EnvironmentSpec { name: "modelwin".into(), mdp, behavior, evaluation, default_horizon: 20 }
}

/// ModelFail: four underlying states, of which `s1`, `s2`, `s3` emit one
/// aliased observation and the absorbing `s4` emits another. `a1` moves from
/// `s1` to the up state (later reward +1), `a2` to the down state (later
/// reward -1). The logger takes `a1` with probability 0.88, the target 0.12.
pub fn make_modelfail() -> EnvironmentSpec {
    let det = |next: StateId, reward: f64| vec![Outcome { next_state: next, reward, probability: 1.0 }];
    let transitions = vec![
        vec![det(1, 0.0), det(2, 0.0)],
        vec![det(3, 1.0), det(3, 1.0)],
        vec![det(3, -1.0), det(3, -1.0)],
        vec![det(3, 0.0), det(3, 0.0)],
    ];
    let mdp = TabularMdp::new(4, 2, transitions, 0, (-1.0, 1.0), vec![0, 0, 0, 1], vec![3])
        .expect("modelfail construction");
    let behavior = StochasticPolicy::stationary(vec![vec![0.88, 0.12], vec![0.5, 0.5]])
        .expect("modelfail behavior");
    let evaluation = StochasticPolicy::stationary(vec![vec![0.12, 0.88], vec![0.5, 0.5]])
        .expect("modelfail evaluation");
    EnvironmentSpec { name: "modelfail".into(), mdp, behavior, evaluation, default_horizon: 2 }
}

const GRID_SIDE: usize = 4;
const UP: usize = 0;
const DOWN: usize = 1;
const LEFT: usize = 2;
const RIGHT: usize = 3;

/// GridWorld state ids follow the column-major numbering of the original
/// domain: `s_k` has index `k-1`, column `(k-1)/4`, row `(k-1)%4`, with row 0
/// at the top. That places `s8` at the bottom of the second column, where
/// "down" bumps the wall and keeps collecting its +1 reward, one "right"
/// step away from the terminal `s12`.
fn grid_rc(index: usize) -> (usize, usize) {
    (index % GRID_SIDE, index / GRID_SIDE)
}

fn grid_index(row: usize, col: usize) -> usize {
    col * GRID_SIDE + row
}

fn grid_move(index: usize, action: usize) -> usize {
    let (row, col) = grid_rc(index);
    let (row, col) = match action {
        UP if row > 0 => (row - 1, col),
        DOWN if row < GRID_SIDE - 1 => (row + 1, col),
        LEFT if col > 0 => (row, col - 1),
        RIGHT if col < GRID_SIDE - 1 => (row, col + 1),
        _ => (row, col),
    };
    grid_index(row, col)
}

/// GridWorld with the default terminal `s12` and horizon 100.
pub fn make_gridworld() -> EnvironmentSpec {
    make_gridworld_with(11, 100)
}

/// GridWorld with a custom terminal state index and horizon. Rewards are -1
/// per step except +1 for entering `s8`, -10 for entering `s6`, and +10 for
/// entering the terminal; the terminal row is an absorbing zero-reward
/// self-loop, which pads episodes that end early out to the full horizon.
pub fn make_gridworld_with(terminal: StateId, horizon: usize) -> EnvironmentSpec {
    let num_states = GRID_SIDE * GRID_SIDE;
    assert!(terminal < num_states);
    let reward_of = |entered: usize| -> f64 {
        if entered == terminal {
            10.0
        } else if entered == 7 {
            1.0
        } else if entered == 5 {
            -10.0
        } else {
            -1.0
        }
    };
    let mut transitions = Vec::with_capacity(num_states);
    for s in 0..num_states {
        let mut rows = Vec::with_capacity(4);
        for a in 0..4 {
            let outcome = if s == terminal {
                Outcome { next_state: terminal, reward: 0.0, probability: 1.0 }
            } else {
                let next = grid_move(s, a);
                Outcome { next_state: next, reward: reward_of(next), probability: 1.0 }
            };
            rows.push(vec![outcome]);
        }
        transitions.push(rows);
    }
    let mdp = TabularMdp::new(
        num_states,
        4,
        transitions,
        0,
        (-10.0, 10.0),
        (0..num_states).collect(),
        vec![terminal],
    )
    .expect("gridworld construction");

    let behavior = StochasticPolicy::uniform(num_states, 4);
    let evaluation = near_optimal_policy(terminal);
    EnvironmentSpec {
        name: "gridworld".into(),
        mdp,
        behavior,
        evaluation,
        default_horizon: horizon,
    }
}

/// The near-deterministic near-optimal policy: walk the left column down,
/// step right into `s8` (avoiding `s6`), keep choosing "down" there to farm
/// the +1 reward, and rely on the 1% exploration mass to eventually take
/// "right" into the terminal. Off-path states route down/into the terminal
/// column. Each prescribed action gets probability 0.99, the rest split the
/// remaining 0.01; the terminal row is uniform so both policies agree there.
fn near_optimal_policy(terminal: StateId) -> StochasticPolicy {
    let num_states = GRID_SIDE * GRID_SIDE;
    let mut prescribed = vec![DOWN; num_states];
    prescribed[3] = RIGHT; // s4 -> s8
    prescribed[4] = LEFT; // s5 rejoins the left column rather than entering s6
    prescribed[15] = LEFT; // s16 -> s12
    if terminal != 11 {
        prescribed[11] = RIGHT; // s12 -> s16 when s16 is the terminal
    }
    let mut rows = Vec::with_capacity(num_states);
    for s in 0..num_states {
        if s == terminal {
            rows.push(vec![0.25; 4]);
        } else {
            let mut row = vec![0.01 / 3.0; 4];
            row[prescribed[s]] = 0.99;
            // Exact normalization: put the residual on the prescribed action.
            let sum: f64 = row.iter().sum();
            row[prescribed[s]] += 1.0 - sum;
            rows.push(row);
        }
    }
    StochasticPolicy::stationary(rows).expect("near-optimal policy")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_policy_value, simulate, DiscountSpec};

    #[test]
    fn all_environments_validate() {
        for name in ENV_NAMES {
            let env = env_by_name(name).unwrap();
            env.validate().unwrap();
            assert_eq!(env.name, name);
        }
        assert!(env_by_name("nope").is_err());
    }

    #[test]
    fn modelwin_numbers_match_the_domain() {
        let env = make_modelwin();
        assert_eq!(env.behavior.prob(1, 0, 0), 0.73);
        assert_eq!(env.evaluation.prob(1, 0, 0), 0.27);
        let o = &env.mdp.transitions[0][0][0];
        assert_eq!((o.next_state, o.reward, o.probability), (1, 1.0, 0.4));
        assert_eq!(env.default_horizon, 20);
    }

    #[test]
    fn modelwin_value_and_symmetry() {
        let env = make_modelwin();
        let disc = DiscountSpec::default();
        let v_e = exact_policy_value(&env.mdp, &env.evaluation, 20, disc).unwrap();
        let v_b = exact_policy_value(&env.mdp, &env.behavior, 20, disc).unwrap();
        // Ten s1 visits, each worth 2*(0.73-0.27)*(0.4-0.6)*(-1)... = 0.092.
        assert!((v_e - 0.92).abs() < 1e-12, "evaluation value {v_e}");
        // Swapping behavior and evaluation swaps the values.
        assert!((v_b + v_e).abs() < 1e-12);
    }

    #[test]
    fn modelwin_behavior_action_frequency() {
        let env = make_modelwin();
        let ds = simulate(&env.mdp, &env.behavior, env.default_horizon, 10_000, 123).unwrap();
        let freq = ds
            .trajectories
            .iter()
            .filter(|t| t.steps[0].action == 0)
            .count() as f64
            / ds.len() as f64;
        assert!((freq - 0.73).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn modelfail_aliases_three_states() {
        let env = make_modelfail();
        assert_eq!(env.behavior.prob(1, 0, 0), 0.88);
        let map = &env.mdp.observation_map;
        assert_eq!(map[0], map[1]);
        assert_eq!(map[1], map[2]);
        assert_ne!(map[0], map[3]);
        assert_eq!(env.default_horizon, 2);
    }

    #[test]
    fn modelfail_values_by_hand_enumeration() {
        let env = make_modelfail();
        let disc = DiscountSpec::default();
        let v_e = exact_policy_value(&env.mdp, &env.evaluation, 2, disc).unwrap();
        let v_b = exact_policy_value(&env.mdp, &env.behavior, 2, disc).unwrap();
        assert!((v_e - (0.12 - 0.88)).abs() < 1e-12, "evaluation value {v_e}");
        assert!((v_b - (0.88 - 0.12)).abs() < 1e-12, "behavior value {v_b}");
    }

    #[test]
    fn gridworld_rewards_and_uniform_policy() {
        let env = make_gridworld();
        // Entering s6 (index 5) from s5 (index 4) by going down costs -10.
        let o = &env.mdp.transitions[4][DOWN][0];
        assert_eq!((o.next_state, o.reward), (5, -10.0));
        // Entering s8 (index 7) pays +1; the terminal s12 pays +10.
        assert_eq!(env.mdp.transitions[3][RIGHT][0].reward, 1.0);
        assert_eq!(env.mdp.transitions[7][RIGHT][0].reward, 10.0);
        // pi_1 is uniform everywhere.
        for obs in 0..16 {
            for a in 0..4 {
                assert_eq!(env.behavior.prob(1, obs, a), 0.25);
            }
        }
        // Terminal row is a zero-reward self-loop.
        for a in 0..4 {
            let o = &env.mdp.transitions[11][a][0];
            assert_eq!((o.next_state, o.reward), (11, 0.0));
        }
    }

    #[test]
    fn gridworld_near_optimal_policy_farms_s8() {
        let env = make_gridworld();
        // Prescribed path: down the first column, right into s8, then down.
        assert!(env.evaluation.prob(1, 0, DOWN) > 0.98);
        assert!(env.evaluation.prob(1, 3, RIGHT) > 0.98);
        assert!(env.evaluation.prob(1, 7, DOWN) > 0.98);
        // It clearly beats the uniform policy.
        let disc = DiscountSpec::default();
        let v5 = exact_policy_value(&env.mdp, &env.evaluation, 100, disc).unwrap();
        let v1 = exact_policy_value(&env.mdp, &env.behavior, 100, disc).unwrap();
        assert!(v5 > 20.0, "near-optimal value {v5}");
        assert!(v1 < 0.0, "uniform value {v1}");
    }

    #[test]
    fn gridworld_terminal_variant() {
        let env = make_gridworld_with(15, 100);
        env.validate().unwrap();
        assert_eq!(env.mdp.terminal_states, vec![15]);
        // s12 now routes right toward s16.
        assert!(env.evaluation.prob(1, 11, RIGHT) > 0.98);
    }
}
