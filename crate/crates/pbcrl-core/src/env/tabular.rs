//! Exact finite-horizon evaluation for small tabular MDPs.
//!
//! Serves as the independent oracle behind Monte-Carlo sanity checks and the
//! covariance-bound verification: backward-induction policy evaluation and,
//! for tiny instances, full trajectory enumeration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stats::softmax;

use super::{Action, Policy};

#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub start: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` is a sparse distribution over next states.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub reward: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.start >= self.n_states {
            return Err(Error::InvalidArgument(format!(
                "start state {} out of range",
                self.start
            )));
        }
        for table in [&self.reward, &self.cost] {
            if table.len() != self.n_states || table.iter().any(|r| r.len() != self.n_actions) {
                return Err(Error::Shape("reward/cost table shape".into()));
            }
        }
        if self.transitions.len() != self.n_states {
            return Err(Error::Shape("transition table shape".into()));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != self.n_actions {
                return Err(Error::Shape(format!("transitions[{s}] arity")));
            }
            for (a, dist) in row.iter().enumerate() {
                let mass: f64 = dist.iter().map(|(_, p)| p).sum();
                if (mass - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "transitions[{s}][{a}] mass {mass}"
                    )));
                }
                if dist.iter().any(|&(ns, p)| ns >= self.n_states || p < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "transitions[{s}][{a}] invalid entry"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_policy(&self, probs: &[Vec<f64>]) -> Result<()> {
        if probs.len() != self.n_states || probs.iter().any(|p| p.len() != self.n_actions) {
            return Err(Error::Shape("policy table shape".into()));
        }
        for (s, p) in probs.iter().enumerate() {
            let mass: f64 = p.iter().sum();
            if (mass - 1.0).abs() > 1e-9 || p.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidArgument(format!("policy row {s} mass {mass}")));
            }
        }
        Ok(())
    }

    /// Exact expected discounted sum of `table` values over `horizon` steps
    /// under a stochastic tabular policy, by backward induction:
    /// `V_t(s) = sum_a pi(a|s) [x(s,a) + gamma * sum_s' P(s'|s,a) V_{t+1}(s')]`.
    fn expected_discounted(
        &self,
        probs: &[Vec<f64>],
        table: &[Vec<f64>],
        gamma: f64,
        horizon: usize,
    ) -> f64 {
        let mut next = vec![0.0; self.n_states];
        let mut cur = vec![0.0; self.n_states];
        for _ in 0..horizon {
            for s in 0..self.n_states {
                let mut v = 0.0;
                for a in 0..self.n_actions {
                    let pa = probs[s][a];
                    if pa == 0.0 {
                        continue;
                    }
                    let mut q = table[s][a];
                    for &(ns, p) in &self.transitions[s][a] {
                        q += gamma * p * next[ns];
                    }
                    v += pa * q;
                }
                cur[s] = v;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        next[self.start]
    }

    pub fn expected_discounted_cost(
        &self,
        policy: &TabularPolicy,
        gamma: f64,
        horizon: usize,
    ) -> Result<f64> {
        self.validate()?;
        self.check_policy(&policy.probs)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma}")));
        }
        Ok(self.expected_discounted(&policy.probs, &self.cost, gamma, horizon))
    }

    pub fn expected_discounted_return(
        &self,
        policy: &TabularPolicy,
        gamma: f64,
        horizon: usize,
    ) -> Result<f64> {
        self.validate()?;
        self.check_policy(&policy.probs)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma}")));
        }
        Ok(self.expected_discounted(&policy.probs, &self.reward, gamma, horizon))
    }

    /// Every length-`horizon` trajectory with its probability under the
    /// policy, as `(probability, [(s_0, a_0), ...])`. Exponential in the
    /// horizon; refused beyond a small budget.
    pub fn enumerate_trajectories(
        &self,
        policy: &TabularPolicy,
        horizon: usize,
    ) -> Result<Vec<(f64, Vec<(usize, usize)>)>> {
        self.validate()?;
        self.check_policy(&policy.probs)?;
        let branch = self.n_actions
            * self
                .transitions
                .iter()
                .flatten()
                .map(|d| d.len())
                .max()
                .unwrap_or(1);
        if (branch as f64).powi(horizon as i32) > 2_000_000.0 {
            return Err(Error::InvalidArgument(format!(
                "enumeration of ~{branch}^{horizon} trajectories is too large"
            )));
        }
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(horizon);
        self.enumerate_rec(policy, horizon, self.start, 1.0, &mut prefix, &mut out);
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        policy: &TabularPolicy,
        remaining: usize,
        s: usize,
        prob: f64,
        prefix: &mut Vec<(usize, usize)>,
        out: &mut Vec<(f64, Vec<(usize, usize)>)>,
    ) {
        if remaining == 0 {
            out.push((prob, prefix.clone()));
            return;
        }
        for a in 0..self.n_actions {
            let pa = policy.probs[s][a];
            if pa == 0.0 {
                continue;
            }
            prefix.push((s, a));
            for &(ns, p) in &self.transitions[s][a] {
                if p == 0.0 {
                    continue;
                }
                self.enumerate_rec(policy, remaining - 1, ns, prob * pa * p, prefix, out);
            }
            prefix.pop();
        }
    }

    /// Discounted cost of one enumerated trajectory.
    pub fn trajectory_cost(&self, steps: &[(usize, usize)], gamma: f64) -> f64 {
        let mut disc = 1.0;
        let mut acc = 0.0;
        for &(s, a) in steps {
            acc += disc * self.cost[s][a];
            disc *= gamma;
        }
        acc
    }
}

/// Stochastic policy over a one-hot tabular observation.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }
}

/// Row-wise softmax of a logit table.
pub fn softmax_policy(logits: &[Vec<f64>]) -> TabularPolicy {
    TabularPolicy {
        probs: logits.iter().map(|row| softmax(row)).collect(),
    }
}

impl Policy for TabularPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Action {
        // one-hot observation -> state index
        let s = obs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite obs"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let row = &self.probs[s.min(self.probs.len() - 1)];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Action::Discrete(a);
            }
        }
        Action::Discrete(row.len() - 1)
    }
}
