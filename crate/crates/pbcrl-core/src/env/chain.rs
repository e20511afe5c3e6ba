//! Hazard-chain environment.
//!
//! A 1-D chain with a sticky hazard segment between the start and the goal.
//! Stepping while inside the segment costs 1, and movement out of it only
//! succeeds with probability `1 - p_stick`, so episode costs are right-skewed:
//! most trajectories that avoid the segment pay nothing, while an unlucky
//! crossing pays a geometric number of unit costs. Reward accrues for every
//! step taken at the goal state. Reward and cost are functions of the state
//! in which the action is taken.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tabular::TabularMdp;
use super::{Action, ActionSpec, Environment, StepOutcome};

pub const CHAIN_ACTIONS: usize = 3; // left, stay, right

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_states: usize,
    /// First state of the hazard segment.
    pub hazard_start: usize,
    /// Number of hazardous states.
    pub hazard_len: usize,
    /// Probability that a move out of a hazardous state fails.
    pub p_stick: f64,
    pub goal_reward: f64,
    /// Safety threshold on undiscounted episode cost.
    pub threshold: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_states: 8,
            hazard_start: 4,
            hazard_len: 2,
            p_stick: 0.85,
            goal_reward: 1.0,
            threshold: 2.0,
            gamma: 0.99,
            horizon: 64,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_states < 3 {
            problems.push(format!("n_states: need at least 3, got {}", self.n_states));
        }
        if self.hazard_len == 0 {
            problems.push("hazard_len: must be positive".into());
        }
        if self.hazard_start == 0 {
            problems.push("hazard_start: segment may not cover the start state".into());
        }
        if self.hazard_start + self.hazard_len >= self.n_states {
            problems.push(format!(
                "hazard segment [{}, {}) must leave the goal state {} clear",
                self.hazard_start,
                self.hazard_start + self.hazard_len,
                self.n_states.saturating_sub(1)
            ));
        }
        if !(0.0..1.0).contains(&self.p_stick) {
            problems.push(format!("p_stick: must lie in [0, 1), got {}", self.p_stick));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            problems.push(format!("gamma: must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.threshold >= 0.0) {
            problems.push(format!("threshold: must be >= 0, got {}", self.threshold));
        }
        if self.horizon == 0 {
            problems.push("horizon: must be positive".into());
        }
        if !self.goal_reward.is_finite() {
            problems.push(format!("goal_reward: must be finite, got {}", self.goal_reward));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                problems.into_iter().map(|p| format!("env.chain.{p}")).collect(),
            ))
        }
    }

    pub fn goal(&self) -> usize {
        self.n_states - 1
    }
}

#[derive(Clone, Debug)]
pub struct ChainHazard {
    cfg: ChainConfig,
    state: usize,
    t: usize,
    rng: ChaCha8Rng,
}

impl ChainHazard {
    pub fn new(cfg: ChainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ChainHazard {
            rng: ChaCha8Rng::seed_from_u64(0),
            state: 0,
            t: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn is_hazard(&self, s: usize) -> bool {
        s >= self.cfg.hazard_start && s < self.cfg.hazard_start + self.cfg.hazard_len
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.cfg.n_states];
        v[s] = 1.0;
        v
    }

    fn moved(&self, s: usize, action: usize) -> usize {
        match action {
            0 => s.saturating_sub(1),
            1 => s,
            2 => (s + 1).min(self.cfg.n_states - 1),
            _ => unreachable!("validated before call"),
        }
    }

    /// Exact transition/reward/cost tables for the oracle.
    pub fn to_tabular(&self) -> TabularMdp {
        let n = self.cfg.n_states;
        let mut transitions = vec![vec![Vec::new(); CHAIN_ACTIONS]; n];
        let mut reward = vec![vec![0.0; CHAIN_ACTIONS]; n];
        let mut cost = vec![vec![0.0; CHAIN_ACTIONS]; n];
        for s in 0..n {
            for a in 0..CHAIN_ACTIONS {
                reward[s][a] = if s == self.cfg.goal() {
                    self.cfg.goal_reward
                } else {
                    0.0
                };
                cost[s][a] = if self.is_hazard(s) { 1.0 } else { 0.0 };
                let target = self.moved(s, a);
                if self.is_hazard(s) && target != s {
                    transitions[s][a] = vec![(s, self.cfg.p_stick), (target, 1.0 - self.cfg.p_stick)];
                } else {
                    transitions[s][a] = vec![(target, 1.0)];
                }
            }
        }
        TabularMdp {
            start: 0,
            n_states: n,
            n_actions: CHAIN_ACTIONS,
            transitions,
            reward,
            cost,
        }
    }
}

impl Environment for ChainHazard {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = 0;
        self.t = 0;
        self.one_hot(0)
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let a = match action {
            Action::Discrete(a) if *a < CHAIN_ACTIONS => *a,
            Action::Discrete(a) => {
                return Err(Error::InvalidArgument(format!(
                    "chain action {a} out of range 0..{CHAIN_ACTIONS}"
                )))
            }
            Action::Continuous(_) => {
                return Err(Error::InvalidArgument(
                    "chain takes discrete actions".into(),
                ))
            }
        };
        if self.t >= self.cfg.horizon {
            return Err(Error::InvalidArgument(
                "step called past the horizon; reset first".into(),
            ));
        }
        let s = self.state;
        let reward = if s == self.cfg.goal() {
            self.cfg.goal_reward
        } else {
            0.0
        };
        let cost = if self.is_hazard(s) { 1.0 } else { 0.0 };
        let target = self.moved(s, a);
        self.state = if self.is_hazard(s) && target != s && self.rng.random::<f64>() < self.cfg.p_stick
        {
            s
        } else {
            target
        };
        self.t += 1;
        Ok(StepOutcome {
            obs: self.one_hot(self.state),
            reward,
            cost,
            done: self.t >= self.cfg.horizon,
        })
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    fn threshold(&self) -> f64 {
        self.cfg.threshold
    }

    fn obs_dim(&self) -> usize {
        self.cfg.n_states
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete { n: CHAIN_ACTIONS }
    }

    fn name(&self) -> &'static str {
        "chain-hazard"
    }
}
