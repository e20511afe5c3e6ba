//! Environments, rollouts, and behavior policies.
//!
//! Both benchmark environments emit a reward and a binary per-step cost; the
//! true cost function is only visible to the labeling oracle and evaluation
//! code, never to the learner.

mod chain;
mod point;
mod tabular;
mod trajectory;

pub use chain::{ChainConfig, ChainHazard};
pub use point::{Circle, PointConfig, PointHazard};
pub use tabular::{softmax_policy, TabularMdp, TabularPolicy};
pub use trajectory::{read_trajectories, write_trajectories, Trajectory, TrajectoryStep};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpec {
    Discrete { n: usize },
    Box { dim: usize, low: f64, high: f64 },
}

impl ActionSpec {
    /// Width of the feature encoding produced by [`ActionSpec::features`].
    pub fn feature_dim(&self) -> usize {
        match self {
            ActionSpec::Discrete { n } => *n,
            ActionSpec::Box { dim, .. } => *dim,
        }
    }

    /// One-hot for discrete actions, the raw (clipped) vector for boxes.
    pub fn features(&self, action: &Action) -> Result<Vec<f64>> {
        match (self, action) {
            (ActionSpec::Discrete { n }, Action::Discrete(a)) => {
                if a >= n {
                    return Err(Error::InvalidArgument(format!(
                        "discrete action {a} out of range 0..{n}"
                    )));
                }
                let mut v = vec![0.0; *n];
                v[*a] = 1.0;
                Ok(v)
            }
            (ActionSpec::Box { dim, low, high }, Action::Continuous(v)) => {
                if v.len() != *dim {
                    return Err(Error::Shape(format!(
                        "continuous action has dim {}, spec wants {dim}",
                        v.len()
                    )));
                }
                Ok(v.iter().map(|x| x.clamp(*low, *high)).collect())
            }
            _ => Err(Error::InvalidArgument(
                "action kind does not match action spec".into(),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

pub trait Environment: Clone {
    /// Resets to the initial state, reseeding all environment randomness.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome>;
    fn horizon(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Safety threshold on the discounted cumulative episode cost.
    fn threshold(&self) -> f64;
    fn obs_dim(&self) -> usize;
    fn action_spec(&self) -> ActionSpec;
    fn name(&self) -> &'static str;
}

pub trait Policy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Action;
}

/// Runs one episode to the environment's horizon (or `done`), recording
/// observations, action features, rewards, and costs. Policy randomness is
/// drawn from a stream derived from `seed`, distinct from the environment's.
pub fn rollout<E: Environment, P: Policy + ?Sized>(
    env: &mut E,
    policy: &P,
    seed: u64,
) -> Result<Trajectory> {
    let spec = env.action_spec();
    let mut obs = env.reset(crate::util::split_seed(seed, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::split_seed(seed, 1));
    let mut steps = Vec::with_capacity(env.horizon());
    for _ in 0..env.horizon() {
        let action = policy.act(&obs, &mut rng);
        let feats = spec.features(&action)?;
        let out = env.step(&action)?;
        steps.push(TrajectoryStep {
            obs,
            action: feats,
            reward: out.reward,
            cost: out.cost,
        });
        obs = out.obs;
        if out.done {
            break;
        }
    }
    Ok(Trajectory {
        steps,
        final_obs: obs,
        seed,
        gamma: env.gamma(),
    })
}

/// Uniform over the action spec: equal-probability discrete choices, or
/// uniform draws inside the box.
#[derive(Clone, Debug)]
pub struct UniformRandomPolicy {
    pub spec: ActionSpec,
}

impl Policy for UniformRandomPolicy {
    fn act(&self, _obs: &[f64], rng: &mut ChaCha8Rng) -> Action {
        match &self.spec {
            ActionSpec::Discrete { n } => Action::Discrete(rng.random_range(0..*n)),
            ActionSpec::Box { dim, low, high } => Action::Continuous(
                (0..*dim).map(|_| rng.random_range(*low..*high)).collect(),
            ),
        }
    }
}

/// Wraps a base policy with epsilon-uniform exploration; the workhorse for
/// building "noisy-greedy" behavior mixtures.
pub struct EpsilonMixPolicy<'a> {
    pub base: &'a dyn Policy,
    pub spec: ActionSpec,
    pub epsilon: f64,
}

impl Policy for EpsilonMixPolicy<'_> {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Action {
        if rng.random::<f64>() < self.epsilon {
            UniformRandomPolicy {
                spec: self.spec.clone(),
            }
            .act(obs, rng)
        } else {
            self.base.act(obs, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_features_discrete() {
        let spec = ActionSpec::Discrete { n: 3 };
        assert_eq!(spec.features(&Action::Discrete(1)).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(spec.features(&Action::Discrete(3)).is_err());
        assert!(spec.features(&Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn action_features_box_clips() {
        let spec = ActionSpec::Box {
            dim: 2,
            low: -1.0,
            high: 1.0,
        };
        assert_eq!(
            spec.features(&Action::Continuous(vec![2.0, -0.5])).unwrap(),
            vec![1.0, -0.5]
        );
        assert!(spec.features(&Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn rollout_is_reproducible() {
        let cfg = ChainConfig::default();
        let mut env = ChainHazard::new(cfg).unwrap();
        let policy = UniformRandomPolicy {
            spec: env.action_spec(),
        };
        let a = rollout(&mut env, &policy, 11).unwrap();
        let b = rollout(&mut env, &policy, 11).unwrap();
        let c = rollout(&mut env, &policy, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), env.horizon());
        assert_eq!(a.seed, 11);
    }
}
