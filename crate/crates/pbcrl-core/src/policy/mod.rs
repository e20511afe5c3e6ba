//! PPO-Lagrangian policy optimization against a learned cost model.
//!
//! The agent maximizes reward subject to the learned constraint by ascending
//! a clipped surrogate on the combined advantage A_reward − λ·A_cost, with
//! separate critics for the reward and learned-cost streams and a Lagrange
//! multiplier updated by dual ascent on the mean estimated trajectory cost.

mod runner;

pub use runner::{pretrain_stage, run_pbcrl, EvalSet, PretrainArtifacts};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::CostModel;
use crate::env::{Action, ActionSpec, Environment, Policy, Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::nn::{adam_step, adam_step_slice, Activation, AdamState, Gradients, Network};
use crate::util::split_seed;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Hyperparameters of the policy-optimization loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Actor step size; must sit between the multiplier and cost-model rates.
    pub lr_theta: f64,
    /// Critic step size (both critics); outside the timescale ordering.
    pub lr_critic: f64,
    /// Dual-ascent step size for the Lagrange multiplier (slowest timescale).
    pub lr_lambda: f64,
    /// Dead-zone calibration step size.
    pub lr_delta: f64,
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    /// Weight of the policy-entropy bonus in the actor objective. Keeps the
    /// policy stochastic enough that the cost critic's backed-up hazard
    /// values stay visible to the gradient once the multiplier grows; 0
    /// disables the bonus.
    pub entropy_coef: f64,
    /// Number of outer iterations (N).
    pub iterations: usize,
    /// Online labeling/finetuning happens when iteration % interval == 0 (K).
    pub finetune_interval: usize,
    pub rollouts_per_iter: usize,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    /// Hidden layer widths shared by the actor and both critics.
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    /// Save actor/cost-model checkpoints every this many iterations; 0 = off.
    pub checkpoint_interval: usize,
    /// Size of the fixed behavior-mixture evaluation set for end-of-run
    /// distribution metrics.
    pub eval_rollouts: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            lr_theta: 8e-5,
            lr_critic: 1e-3,
            lr_lambda: 5e-5,
            lr_delta: 0.1,
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            iterations: 300,
            finetune_interval: 25,
            rollouts_per_iter: 8,
            ppo_epochs: 4,
            minibatch_size: 128,
            hidden: vec![32],
            log_std_init: -0.5,
            checkpoint_interval: 0,
            eval_rollouts: 64,
        }
    }
}

impl PolicyConfig {
    /// Collect every violated invariant, prefixed with the field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("policy.lr_theta", self.lr_theta),
            ("policy.lr_critic", self.lr_critic),
            ("policy.lr_lambda", self.lr_lambda),
            ("policy.lr_delta", self.lr_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name}: must be positive and finite, got {v}"));
            }
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            out.push(format!(
                "policy.clip_epsilon: must lie in (0, 1), got {}",
                self.clip_epsilon
            ));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            out.push(format!(
                "policy.gae_lambda: must lie in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            out.push(format!(
                "policy.entropy_coef: must be >= 0 and finite, got {}",
                self.entropy_coef
            ));
        }
        if self.finetune_interval == 0 {
            out.push("policy.finetune_interval: must be at least 1".into());
        }
        if self.rollouts_per_iter == 0 {
            out.push("policy.rollouts_per_iter: must be at least 1".into());
        }
        if self.ppo_epochs == 0 {
            out.push("policy.ppo_epochs: must be at least 1".into());
        }
        if self.minibatch_size == 0 {
            out.push("policy.minibatch_size: must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            out.push("policy.hidden: need at least one nonzero hidden width".into());
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.log_std_init) {
            out.push(format!(
                "policy.log_std_init: must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}], got {}",
                self.log_std_init
            ));
        }
        if self.eval_rollouts == 0 {
            out.push("policy.eval_rollouts: must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Generalized advantage estimation over one episode.
///
/// `values` must hold one entry per step plus a bootstrap value for the state
/// after the last step. Returns per-step advantages and value-regression
/// targets (advantage + value).
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Shape(format!(
            "need {} value estimates for {} rewards (bootstrap included), got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * gae_lambda * acc;
        adv[t] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Combined advantage A_reward − λ·A_cost.
pub fn lagrangian_advantage(adv_reward: f64, adv_cost: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0, "multiplier must be nonnegative");
    adv_reward - lambda * adv_cost
}

/// Dual ascent on the multiplier, clamped at zero:
/// λ' = max(0, λ + lr·mean estimated cost).
pub fn multiplier_update(lambda: f64, mean_learned_cost: f64, lr_lambda: f64) -> f64 {
    debug_assert!(lr_lambda > 0.0, "multiplier step size must be positive");
    (lambda + lr_lambda * mean_learned_cost).max(0.0)
}

/// Clipped-surrogate objective for one sample and its gradient in the new
/// log-probability: min(r·A, clip(r, 1−ε, 1+ε)·A) with r = exp(logp − logp_old).
///
/// The gradient is r·A when the unclipped branch is active and zero once the
/// clip saturates (the two branches agree whenever r is inside the band).
pub fn clip_objective(logp_new: f64, logp_old: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let surr1 = ratio * advantage;
    let surr2 = clipped * advantage;
    if surr1 <= surr2 {
        (surr1, ratio * advantage)
    } else {
        (surr2, 0.0)
    }
}

/// Distribution head on top of the actor network's outputs.
#[derive(Clone, Debug)]
pub enum ActorHead {
    /// Softmax over one logit per discrete action.
    Categorical { n: usize },
    /// Diagonal Gaussian: network outputs the mean, the log standard
    /// deviations are standalone learned parameters clamped to
    /// [LOG_STD_MIN, LOG_STD_MAX]; raw samples are clipped by the env.
    Gaussian { log_std: Vec<f64>, low: f64, high: f64 },
}

/// Actor, two critics, and the Lagrange multiplier, with optimizer state.
#[derive(Clone, Debug)]
pub struct PolicyAgent {
    pub actor: Network,
    pub head: ActorHead,
    pub reward_critic: Network,
    pub cost_critic: Network,
    pub lambda: f64,
    adam_actor: AdamState,
    adam_log_std: AdamState,
    adam_reward: AdamState,
    adam_cost: AdamState,
}

impl PolicyAgent {
    pub fn new(
        obs_dim: usize,
        spec: &ActionSpec,
        hidden: &[usize],
        log_std_init: f64,
        seed: u64,
    ) -> Result<Self> {
        let (out_dim, head) = match spec {
            ActionSpec::Discrete { n } => (*n, ActorHead::Categorical { n: *n }),
            ActionSpec::Box { dim, low, high } => (
                *dim,
                ActorHead::Gaussian {
                    log_std: vec![log_std_init.clamp(LOG_STD_MIN, LOG_STD_MAX); *dim],
                    low: *low,
                    high: *high,
                },
            ),
        };
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend_from_slice(hidden);
        actor_sizes.push(out_dim);
        let mut critic_sizes = vec![obs_dim];
        critic_sizes.extend_from_slice(hidden);
        critic_sizes.push(1);
        let actor = Network::new(&actor_sizes, Activation::Tanh, split_seed(seed, 0))?;
        let reward_critic = Network::new(&critic_sizes, Activation::Tanh, split_seed(seed, 1))?;
        let cost_critic = Network::new(&critic_sizes, Activation::Tanh, split_seed(seed, 2))?;
        let adam_actor = AdamState::new(actor.param_count());
        let log_std_dim = match &head {
            ActorHead::Gaussian { log_std, .. } => log_std.len(),
            ActorHead::Categorical { .. } => 0,
        };
        Ok(PolicyAgent {
            adam_log_std: AdamState::new(log_std_dim),
            adam_reward: AdamState::new(reward_critic.param_count()),
            adam_cost: AdamState::new(cost_critic.param_count()),
            actor,
            head,
            reward_critic,
            cost_critic,
            lambda: 0.0,
            adam_actor,
        })
    }

    /// Draw an action and return it with its log-probability under the
    /// current parameters. Continuous samples are returned unclipped so that
    /// the stored log-probability matches the sampling distribution; the env
    /// clips on execution.
    pub fn sample_action(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<(Action, f64)> {
        let out = self.actor.forward(obs)?;
        match &self.head {
            ActorHead::Categorical { n } => {
                let lse = crate::stats::log_sum_exp(&out);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (j, z) in out.iter().enumerate() {
                    acc += (z - lse).exp();
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                Ok((Action::Discrete(pick), out[pick] - lse))
            }
            ActorHead::Gaussian { log_std, .. } => {
                let mut a = Vec::with_capacity(out.len());
                let mut logp = 0.0;
                for (mu, ls) in out.iter().zip(log_std) {
                    let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                    let std = ls.exp();
                    let xi: f64 = rng.sample(rand_distr::StandardNormal);
                    a.push(mu + std * xi);
                    logp += -0.5 * xi * xi - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
                }
                Ok((Action::Continuous(a), logp))
            }
        }
    }

    /// Log-probability of a previously sampled (raw) action under the
    /// current parameters.
    pub fn log_prob(&self, obs: &[f64], action: &Action) -> Result<f64> {
        let out = self.actor.forward(obs)?;
        self.log_prob_from_outputs(&out, action).map(|(lp, _, _)| lp)
    }

    /// Log-probability plus its gradients: in the actor outputs and, for the
    /// Gaussian head, in the log-std parameters.
    fn log_prob_from_outputs(
        &self,
        out: &[f64],
        action: &Action,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        match (&self.head, action) {
            (ActorHead::Categorical { n }, Action::Discrete(a)) => {
                if a >= n {
                    return Err(Error::InvalidArgument(format!(
                        "discrete action {a} out of range 0..{n}"
                    )));
                }
                let lse = crate::stats::log_sum_exp(out);
                let logp = out[*a] - lse;
                let mut grad_out = Vec::with_capacity(out.len());
                for (j, z) in out.iter().enumerate() {
                    let p = (z - lse).exp();
                    grad_out.push(if j == *a { 1.0 - p } else { -p });
                }
                Ok((logp, grad_out, Vec::new()))
            }
            (ActorHead::Gaussian { log_std, .. }, Action::Continuous(a)) => {
                if a.len() != out.len() {
                    return Err(Error::Shape(format!(
                        "continuous action has dim {}, actor outputs {}",
                        a.len(),
                        out.len()
                    )));
                }
                let mut logp = 0.0;
                let mut grad_mu = Vec::with_capacity(out.len());
                let mut grad_ls = Vec::with_capacity(out.len());
                for ((mu, ls), ai) in out.iter().zip(log_std).zip(a) {
                    let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                    let inv_var = (-2.0 * ls).exp();
                    let diff = ai - mu;
                    logp += -0.5 * diff * diff * inv_var - ls
                        - 0.5 * (2.0 * std::f64::consts::PI).ln();
                    grad_mu.push(diff * inv_var);
                    grad_ls.push(diff * diff * inv_var - 1.0);
                }
                Ok((logp, grad_mu, grad_ls))
            }
            _ => Err(Error::InvalidArgument(
                "action kind does not match the actor head".into(),
            )),
        }
    }

    /// Entropy of the action distribution at these actor outputs, with its
    /// gradients in the outputs and in the log-std parameters.
    ///
    /// Categorical: H = −Σ p_j ln p_j with dH/dz_j = −p_j (ln p_j + H).
    /// Gaussian: the differential entropy Σ_k (log_std_k + ½ ln 2πe), which
    /// depends only on the log-stds (dH/dlog_std_k = 1).
    fn entropy_from_outputs(&self, out: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        match &self.head {
            ActorHead::Categorical { .. } => {
                let lse = crate::stats::log_sum_exp(out);
                let probs: Vec<f64> = out.iter().map(|z| (z - lse).exp()).collect();
                let mut h = 0.0;
                for &p in &probs {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
                let grad_out = probs
                    .iter()
                    .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
                    .collect();
                (h, grad_out, Vec::new())
            }
            ActorHead::Gaussian { log_std, .. } => {
                let half_ln_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
                let h = log_std
                    .iter()
                    .map(|ls| ls.clamp(LOG_STD_MIN, LOG_STD_MAX) + half_ln_2pi_e)
                    .sum();
                (h, vec![0.0; out.len()], vec![1.0; log_std.len()])
            }
        }
    }

    pub fn value_estimates(&self, net: &Network, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(traj.steps.len() + 1);
        for step in &traj.steps {
            v.push(net.forward(&step.obs)?[0]);
        }
        v.push(net.forward(&traj.final_obs)?[0]);
        Ok(v)
    }

    pub fn check_finite(&self) -> Result<()> {
        self.actor.check_finite()?;
        self.reward_critic.check_finite()?;
        self.cost_critic.check_finite()?;
        if !self.lambda.is_finite() {
            return Err(Error::NonFinite("lagrange multiplier".into()));
        }
        if let ActorHead::Gaussian { log_std, .. } = &self.head {
            if log_std.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("log-std parameters".into()));
            }
        }
        Ok(())
    }
}

impl Policy for PolicyAgent {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Action {
        self.sample_action(obs, rng)
            .map(|(a, _)| a)
            .expect("actor evaluation failed")
    }
}

/// One environment step as consumed by the PPO update.
#[derive(Clone, Debug)]
pub struct PpoSample {
    pub obs: Vec<f64>,
    /// Raw action as sampled (unclipped for Gaussian heads).
    pub action: Action,
    pub logp_old: f64,
    pub reward: f64,
    /// Per-step cost under the learned cost model.
    pub cost_hat: f64,
    pub adv_reward: f64,
    pub adv_cost: f64,
    pub adv_lagrangian: f64,
    pub target_reward: f64,
    pub target_cost: f64,
}

/// Flattened on-policy batch plus the trajectories it came from.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub samples: Vec<PpoSample>,
    pub trajectories: Vec<Trajectory>,
    /// (start, len) of each trajectory's samples in `samples`.
    pub spans: Vec<(usize, usize)>,
}

impl RolloutBatch {
    /// Mean learned (discounted) trajectory cost — the dual-ascent signal.
    pub fn mean_learned_cost(&self, model: &CostModel) -> Result<f64> {
        let mut acc = 0.0;
        for t in &self.trajectories {
            acc += model.traj_cost_estimate(t)?;
        }
        Ok(acc / self.trajectories.len().max(1) as f64)
    }
}

/// Roll out the agent for `n_rollouts` episodes, recording both the
/// trajectories (feature-encoded actions, for labeling and cost estimation)
/// and the raw PPO samples with cached log-probabilities and per-step
/// learned costs.
pub fn collect_rollouts<E: Environment>(
    env: &E,
    agent: &PolicyAgent,
    cost_model: &CostModel,
    n_rollouts: usize,
    seed: u64,
) -> Result<RolloutBatch> {
    let spec = env.action_spec();
    let mut samples = Vec::with_capacity(n_rollouts * env.horizon());
    let mut trajectories = Vec::with_capacity(n_rollouts);
    let mut spans = Vec::with_capacity(n_rollouts);
    for k in 0..n_rollouts {
        let rollout_seed = split_seed(seed, k as u64);
        let mut e = env.clone();
        let mut obs = e.reset(split_seed(rollout_seed, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(rollout_seed, 1));
        let start = samples.len();
        let mut steps = Vec::with_capacity(env.horizon());
        for _ in 0..env.horizon() {
            let (action, logp) = agent.sample_action(&obs, &mut rng)?;
            if !logp.is_finite() {
                return Err(Error::NonFinite("cached log-probability".into()));
            }
            let features = spec.features(&action)?;
            let outcome = e.step(&action)?;
            let cost_hat = cost_model.step_cost(&obs, &features)?;
            samples.push(PpoSample {
                obs: obs.clone(),
                action,
                logp_old: logp,
                reward: outcome.reward,
                cost_hat,
                adv_reward: 0.0,
                adv_cost: 0.0,
                adv_lagrangian: 0.0,
                target_reward: 0.0,
                target_cost: 0.0,
            });
            steps.push(TrajectoryStep {
                obs,
                action: features,
                reward: outcome.reward,
                cost: outcome.cost,
            });
            obs = outcome.obs;
            if outcome.done {
                break;
            }
        }
        spans.push((start, samples.len() - start));
        trajectories.push(Trajectory {
            steps,
            final_obs: obs,
            seed: rollout_seed,
        });
    }
    Ok(RolloutBatch {
        samples,
        trajectories,
        spans,
    })
}

/// Fill per-sample advantages and value targets: GAE over the true-reward
/// stream and the learned-cost stream, combined with the agent's current
/// multiplier.
pub fn prepare_advantages(
    agent: &PolicyAgent,
    batch: &mut RolloutBatch,
    gamma: f64,
    gae_lambda: f64,
) -> Result<()> {
    for (traj, &(start, len)) in batch.trajectories.iter().zip(&batch.spans) {
        let rewards: Vec<f64> = batch.samples[start..start + len]
            .iter()
            .map(|s| s.reward)
            .collect();
        let costs: Vec<f64> = batch.samples[start..start + len]
            .iter()
            .map(|s| s.cost_hat)
            .collect();
        let values_r = agent.value_estimates(&agent.reward_critic, traj)?;
        let values_c = agent.value_estimates(&agent.cost_critic, traj)?;
        let (adv_r, targ_r) = gae_advantages(&rewards, &values_r, gamma, gae_lambda)?;
        let (adv_c, targ_c) = gae_advantages(&costs, &values_c, gamma, gae_lambda)?;
        for i in 0..len {
            let s = &mut batch.samples[start + i];
            s.adv_reward = adv_r[i];
            s.adv_cost = adv_c[i];
            s.adv_lagrangian = lagrangian_advantage(adv_r[i], adv_c[i], agent.lambda);
            s.target_reward = targ_r[i];
            s.target_cost = targ_c[i];
        }
    }
    Ok(())
}

/// Diagnostics from one PPO update.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PpoStats {
    /// Mean clipped surrogate (entropy bonus excluded).
    pub actor_objective: f64,
    pub reward_value_loss: f64,
    pub cost_value_loss: f64,
    pub clip_fraction: f64,
    /// Mean policy entropy over the processed samples.
    pub mean_entropy: f64,
}

/// Multiple epochs of minibatch clipped-surrogate ascent plus critic
/// regression. Advantages are normalized once over the whole batch (zero
/// mean, unit variance) before the epochs run.
pub fn ppo_update(
    agent: &mut PolicyAgent,
    batch: &RolloutBatch,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<PpoStats> {
    if batch.samples.is_empty() {
        return Err(Error::DegenerateData("empty rollout batch".into()));
    }
    let n = batch.samples.len();
    let advs: Vec<f64> = batch.samples.iter().map(|s| s.adv_lagrangian).collect();
    let mean = crate::stats::mean(&advs);
    let std = if n > 1 { crate::stats::std_dev(&advs) } else { 0.0 };
    let scale = if std > 1e-8 { std } else { 1.0 };
    let normalized: Vec<f64> = advs.iter().map(|a| (a - mean) / scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 97));
    let mut stats = PpoStats::default();
    let mut stat_count = 0usize;
    let mut clip_hits = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut grad_actor = Gradients::zeros_like(&agent.actor);
    let mut grad_reward = Gradients::zeros_like(&agent.reward_critic);
    let mut grad_cost = Gradients::zeros_like(&agent.cost_critic);
    for _ in 0..cfg.ppo_epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.minibatch_size) {
            let m = chunk.len() as f64;
            grad_actor.scale(0.0);
            grad_reward.scale(0.0);
            grad_cost.scale(0.0);
            let mut grad_log_std = match &agent.head {
                ActorHead::Gaussian { log_std, .. } => vec![0.0; log_std.len()],
                ActorHead::Categorical { .. } => Vec::new(),
            };
            for &i in chunk {
                let s = &batch.samples[i];
                if !s.logp_old.is_finite() {
                    return Err(Error::NonFinite("cached log-probability".into()));
                }
                let trace = agent.actor.forward_trace(&s.obs)?;
                let out = trace.output();
                let (logp, grad_out, grad_ls) = agent.log_prob_from_outputs(out, &s.action)?;
                let (objective, dobj_dlogp) =
                    clip_objective(logp, s.logp_old, normalized[i], cfg.clip_epsilon);
                if !objective.is_finite() {
                    return Err(Error::NonFinite("clipped surrogate".into()));
                }
                stats.actor_objective += objective;
                if dobj_dlogp == 0.0 && normalized[i] != 0.0 {
                    clip_hits += 1;
                }
                stat_count += 1;
                let (entropy, ent_grad_out, ent_grad_ls) = agent.entropy_from_outputs(out);
                stats.mean_entropy += entropy;
                // Ascent on surrogate + entropy bonus = descent on the
                // negation of both terms.
                let coeff = -dobj_dlogp / m;
                let ent_coeff = -cfg.entropy_coef / m;
                let mut upstream = vec![0.0; out.len()];
                if coeff != 0.0 {
                    for (u, g) in upstream.iter_mut().zip(&grad_out) {
                        *u += coeff * g;
                    }
                    for (g, d) in grad_log_std.iter_mut().zip(&grad_ls) {
                        *g += coeff * d;
                    }
                }
                if cfg.entropy_coef > 0.0 {
                    for (u, g) in upstream.iter_mut().zip(&ent_grad_out) {
                        *u += ent_coeff * g;
                    }
                    for (g, d) in grad_log_std.iter_mut().zip(&ent_grad_ls) {
                        *g += ent_coeff * d;
                    }
                }
                if upstream.iter().any(|&u| u != 0.0) {
                    agent.actor.backward_into(&trace, &upstream, &mut grad_actor)?;
                }

                let tr = agent.reward_critic.forward_trace(&s.obs)?;
                let v = tr.output()[0];
                stats.reward_value_loss += (v - s.target_reward).powi(2);
                agent.reward_critic.backward_into(
                    &tr,
                    &[2.0 * (v - s.target_reward) / m],
                    &mut grad_reward,
                )?;
                let tc = agent.cost_critic.forward_trace(&s.obs)?;
                let vc = tc.output()[0];
                stats.cost_value_loss += (vc - s.target_cost).powi(2);
                agent.cost_critic.backward_into(
                    &tc,
                    &[2.0 * (vc - s.target_cost) / m],
                    &mut grad_cost,
                )?;
            }
            adam_step(&mut agent.actor, &grad_actor, &mut agent.adam_actor, cfg.lr_theta)?;
            adam_step(
                &mut agent.reward_critic,
                &grad_reward,
                &mut agent.adam_reward,
                cfg.lr_critic,
            )?;
            adam_step(
                &mut agent.cost_critic,
                &grad_cost,
                &mut agent.adam_cost,
                cfg.lr_critic,
            )?;
            if let ActorHead::Gaussian { log_std, .. } = &mut agent.head {
                adam_step_slice(log_std, &grad_log_std, &mut agent.adam_log_std, cfg.lr_theta)?;
                for ls in log_std.iter_mut() {
                    *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
            }
        }
    }
    agent.check_finite()?;
    let denom = stat_count.max(1) as f64;
    stats.actor_objective /= denom;
    stats.reward_value_loss /= denom;
    stats.cost_value_loss /= denom;
    stats.clip_fraction = clip_hits as f64 / denom;
    stats.mean_entropy /= denom;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{softmax_policy, ChainConfig, ChainHazard};
    use crate::stats::{mean, std_dev};

    #[test]
    fn gae_zero_inputs_give_zero_advantages() {
        let rewards = [0.0; 5];
        let values = [0.0; 6];
        let (adv, targets) = gae_advantages(&rewards, &values, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        assert!(targets.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let rewards = [1.0, -0.5, 2.0];
        let values = [0.3, 0.7, -0.2, 0.4];
        let gamma = 0.9;
        let (adv, targets) = gae_advantages(&rewards, &values, gamma, 0.0).unwrap();
        for t in 0..3 {
            let td = rewards[t] + gamma * values[t + 1] - values[t];
            assert!((adv[t] - td).abs() < 1e-12);
            assert!((targets[t] - (td + values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_full_lambda_undiscounted_is_suffix_sum() {
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let values = [0.0; 5];
        let (adv, _) = gae_advantages(&rewards, &values, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn gae_rejects_length_mismatch() {
        assert!(gae_advantages(&[1.0, 2.0], &[0.0, 0.0], 0.99, 0.95).is_err());
    }

    #[test]
    fn lagrangian_advantage_examples() {
        assert_eq!(lagrangian_advantage(1.7, 9.9, 0.0), 1.7);
        assert!((lagrangian_advantage(2.0, 1.0, 0.5) - 1.5).abs() < 1e-15);
        assert!((lagrangian_advantage(0.0, 3.0, 2.0) + 6.0).abs() < 1e-15);
    }

    #[test]
    fn multiplier_update_examples() {
        assert_eq!(multiplier_update(0.5, -1.0, 1.0), 0.0);
        assert!((multiplier_update(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(multiplier_update(0.7, 0.0, 0.1), 0.7);
        // Clamp keeps the multiplier nonnegative for any inputs.
        for (l, c) in [(0.0, -5.0), (0.2, -100.0), (3.0, -3.1)] {
            assert!(multiplier_update(l, c, 1.0) >= 0.0);
        }
    }

    #[test]
    fn clip_objective_cases() {
        // Ratio above the band with positive advantage: clipped, zero grad.
        let (obj, grad) = clip_objective(1.5f64.ln(), 0.0, 1.0, 0.2);
        assert!((obj - 1.2).abs() < 1e-12);
        assert_eq!(grad, 0.0);
        // Ratio inside the band: unclipped value and gradient r*A.
        let (obj, grad) = clip_objective(1.1f64.ln(), 0.0, 2.0, 0.2);
        assert!((obj - 2.2).abs() < 1e-12);
        assert!((grad - 2.2).abs() < 1e-12);
        // Negative advantage, ratio below the band: min picks the clipped
        // (more pessimistic) branch, gradient zero.
        let (obj, grad) = clip_objective(0.5f64.ln(), 0.0, -1.0, 0.2);
        assert!((obj + 0.8).abs() < 1e-12);
        assert_eq!(grad, 0.0);
        // Negative advantage, ratio above the band: unclipped branch is the
        // minimum and keeps pushing the ratio back down.
        let (obj, grad) = clip_objective(1.5f64.ln(), 0.0, -1.0, 0.2);
        assert!((obj + 1.5).abs() < 1e-12);
        assert!((grad + 1.5).abs() < 1e-12);
    }

    fn categorical_agent(seed: u64) -> PolicyAgent {
        PolicyAgent::new(4, &ActionSpec::Discrete { n: 3 }, &[8], -0.5, seed).unwrap()
    }

    fn gaussian_agent(seed: u64) -> PolicyAgent {
        PolicyAgent::new(
            3,
            &ActionSpec::Box { dim: 2, low: -1.0, high: 1.0 },
            &[8],
            -0.5,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn sampled_log_probability_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for agent in [categorical_agent(1), gaussian_agent(2)] {
            let obs: Vec<f64> = (0..agent.actor.sizes()[0])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            for _ in 0..20 {
                let (action, logp) = agent.sample_action(&obs, &mut rng).unwrap();
                let recomputed = agent.log_prob(&obs, &action).unwrap();
                assert!((logp - recomputed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn categorical_probabilities_sum_to_one_under_sampling() {
        let agent = categorical_agent(3);
        let obs = vec![0.2, -0.4, 0.9, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            if let (Action::Discrete(a), _) = agent.sample_action(&obs, &mut rng).unwrap() {
                counts[a] += 1;
            }
        }
        let out = agent.actor.forward(&obs).unwrap();
        let lse = crate::stats::log_sum_exp(&out);
        for (j, c) in counts.iter().enumerate() {
            let p = (out[j] - lse).exp();
            let freq = *c as f64 / n as f64;
            // 4-sigma binomial band.
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 4.0 * sigma + 1e-3,
                "action {j}: freq {freq} vs prob {p}"
            );
        }
    }

    /// Analytic gradient of the log-probability in every actor parameter
    /// (and log-std), checked against central finite differences.
    #[test]
    fn log_probability_gradients_match_finite_differences() {
        let h = 1e-6;
        let cases: Vec<(PolicyAgent, Action)> = vec![
            (categorical_agent(7), Action::Discrete(2)),
            (gaussian_agent(8), Action::Continuous(vec![0.3, -0.8])),
        ];
        for (mut agent, action) in cases {
            let obs: Vec<f64> = (0..agent.actor.sizes()[0]).map(|i| 0.1 * i as f64 - 0.2).collect();
            let trace = agent.actor.forward_trace(&obs).unwrap();
            let (_, grad_out, grad_ls) =
                agent.log_prob_from_outputs(trace.output(), &action).unwrap();
            let mut grads = Gradients::zeros_like(&agent.actor);
            agent.actor.backward_into(&trace, &grad_out, &mut grads).unwrap();
            let analytic = grads.flat();
            let params = agent.actor.params();
            for k in 0..params.len() {
                let mut plus = params.clone();
                plus[k] += h;
                agent.actor.set_params(&plus).unwrap();
                let lp = agent.log_prob(&obs, &action).unwrap();
                let mut minus = params.clone();
                minus[k] -= h;
                agent.actor.set_params(&minus).unwrap();
                let lm = agent.log_prob(&obs, &action).unwrap();
                agent.actor.set_params(&params).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {k}: fd {fd} vs analytic {}",
                    analytic[k]
                );
            }
            // Log-std gradients for the Gaussian head.
            let n_ls = grad_ls.len();
            for k in 0..n_ls {
                let orig = log_std_value(&agent.head, k);
                let mut agent_plus = agent.clone();
                log_std_set(&mut agent_plus.head, k, orig + h);
                let mut agent_minus = agent.clone();
                log_std_set(&mut agent_minus.head, k, orig - h);
                let lp = agent_plus.log_prob(&obs, &action).unwrap();
                let lm = agent_minus.log_prob(&obs, &action).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - grad_ls[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "log_std {k}: fd {fd} vs analytic {}",
                    grad_ls[k]
                );
            }
        }
    }

    fn log_std_value(head: &ActorHead, k: usize) -> f64 {
        match head {
            ActorHead::Gaussian { log_std, .. } => log_std[k],
            ActorHead::Categorical { .. } => unreachable!("categorical head has no log-std"),
        }
    }

    fn log_std_set(head: &mut ActorHead, k: usize, value: f64) {
        if let ActorHead::Gaussian { log_std, .. } = head {
            log_std[k] = value;
        }
    }

    fn chain_fixture() -> (ChainHazard, CostModel) {
        let env = ChainHazard::new(ChainConfig::default()).unwrap();
        let in_dim = env.obs_dim() + env.action_spec().feature_dim();
        let net = Network::new(&[in_dim, 8, 1], Activation::Tanh, 99).unwrap();
        let model = CostModel::new(net, 1.0, env.gamma()).unwrap();
        (env, model)
    }

    #[test]
    fn rollout_collection_is_deterministic_and_consistent() {
        let (env, model) = chain_fixture();
        let agent = PolicyAgent::new(
            env.obs_dim(),
            &env.action_spec(),
            &[8],
            -0.5,
            21,
        )
        .unwrap();
        let a = collect_rollouts(&env, &agent, &model, 3, 50).unwrap();
        let b = collect_rollouts(&env, &agent, &model, 3, 50).unwrap();
        assert_eq!(a.trajectories.len(), 3);
        assert_eq!(a.spans.len(), 3);
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.content_hash(), tb.content_hash());
        }
        // Cached log-probabilities match post-hoc recomputation.
        for s in &a.samples {
            let lp = agent.log_prob(&s.obs, &s.action).unwrap();
            assert!((lp - s.logp_old).abs() < 1e-12);
        }
        // Samples and trajectory steps describe the same episode.
        let (start, len) = a.spans[0];
        assert_eq!(len, a.trajectories[0].steps.len());
        for (s, step) in a.samples[start..start + len]
            .iter()
            .zip(&a.trajectories[0].steps)
        {
            assert_eq!(s.obs, step.obs);
            assert_eq!(s.reward, step.reward);
        }
    }

    fn prepared_batch(
        env: &ChainHazard,
        model: &CostModel,
        agent: &PolicyAgent,
        seed: u64,
    ) -> RolloutBatch {
        let mut batch = collect_rollouts(env, agent, model, 4, seed).unwrap();
        prepare_advantages(agent, &mut batch, env.gamma(), 0.95).unwrap();
        batch
    }

    #[test]
    fn ppo_update_is_deterministic() {
        let (env, model) = chain_fixture();
        let mut a = PolicyAgent::new(env.obs_dim(), &env.action_spec(), &[8], -0.5, 33).unwrap();
        let mut b = a.clone();
        let cfg = PolicyConfig { minibatch_size: 32, ppo_epochs: 2, ..PolicyConfig::default() };
        let batch = prepared_batch(&env, &model, &a, 60);
        ppo_update(&mut a, &batch, &cfg, 9).unwrap();
        ppo_update(&mut b, &batch, &cfg, 9).unwrap();
        assert_eq!(a.actor.params(), b.actor.params());
        assert_eq!(a.reward_critic.params(), b.reward_critic.params());
        assert_eq!(a.cost_critic.params(), b.cost_critic.params());
    }

    #[test]
    fn zero_advantages_leave_actor_unchanged() {
        let (env, model) = chain_fixture();
        let mut agent = PolicyAgent::new(env.obs_dim(), &env.action_spec(), &[8], -0.5, 34).unwrap();
        let mut batch = prepared_batch(&env, &model, &agent, 61);
        for s in &mut batch.samples {
            s.adv_lagrangian = 0.0;
        }
        let before = agent.actor.params();
        let critic_before = agent.reward_critic.params();
        // Entropy bonus off so only the advantage pathway can move the actor.
        let cfg = PolicyConfig { ppo_epochs: 1, entropy_coef: 0.0, ..PolicyConfig::default() };
        ppo_update(&mut agent, &batch, &cfg, 10).unwrap();
        assert_eq!(agent.actor.params(), before);
        // Critics still move: value regression is independent of advantages.
        assert_ne!(agent.reward_critic.params(), critic_before);
    }

    #[test]
    fn entropy_bonus_alone_pushes_toward_uniform_policy() {
        let (env, model) = chain_fixture();
        let mut agent = PolicyAgent::new(env.obs_dim(), &env.action_spec(), &[8], -0.5, 36).unwrap();
        let mut batch = prepared_batch(&env, &model, &agent, 63);
        for s in &mut batch.samples {
            s.adv_lagrangian = 0.0;
        }
        let cfg = PolicyConfig {
            ppo_epochs: 1,
            entropy_coef: 0.05,
            lr_theta: 1e-2,
            minibatch_size: 4096,
            ..PolicyConfig::default()
        };
        let before = ppo_update(&mut agent, &batch, &cfg, 12).unwrap();
        let after = ppo_update(&mut agent, &batch, &cfg, 12).unwrap();
        assert!(
            after.mean_entropy > before.mean_entropy,
            "entropy did not increase: {} -> {}",
            before.mean_entropy,
            after.mean_entropy
        );
    }

    #[test]
    fn categorical_entropy_gradient_matches_finite_differences() {
        let (env, _) = chain_fixture();
        let agent = PolicyAgent::new(env.obs_dim(), &env.action_spec(), &[8], -0.5, 37).unwrap();
        let mut e = env.clone();
        let obs = e.reset(5);
        let trace = agent.actor.forward_trace(&obs).unwrap();
        let (_, ent_grad_out, _) = agent.entropy_from_outputs(trace.output());
        let mut analytic = Gradients::zeros_like(&agent.actor);
        agent
            .actor
            .backward_into(&trace, &ent_grad_out, &mut analytic)
            .unwrap();
        let analytic = analytic.flat();
        let params = agent.actor.params();
        let h = 1e-6;
        for k in 0..params.len() {
            let mut probe = agent.clone();
            let mut plus = params.clone();
            plus[k] += h;
            probe.actor.set_params(&plus).unwrap();
            let (hp, _, _) = probe.entropy_from_outputs(&probe.actor.forward(&obs).unwrap());
            let mut minus = params.clone();
            minus[k] -= h;
            probe.actor.set_params(&minus).unwrap();
            let (hm, _, _) = probe.entropy_from_outputs(&probe.actor.forward(&obs).unwrap());
            let fd = (hp - hm) / (2.0 * h);
            assert!(
                (analytic[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {k}: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }

    #[test]
    fn gaussian_entropy_depends_only_on_log_std() {
        let spec = ActionSpec::Box { dim: 2, low: -1.0, high: 1.0 };
        let agent = PolicyAgent::new(3, &spec, &[8], -0.5, 38).unwrap();
        let out = agent.actor.forward(&[0.1, -0.2, 0.3]).unwrap();
        let (h, grad_out, grad_ls) = agent.entropy_from_outputs(&out);
        assert!(grad_out.iter().all(|&g| g == 0.0));
        assert_eq!(grad_ls, vec![1.0, 1.0]);
        let half_ln_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - 2.0 * (-0.5 + half_ln_2pi_e)).abs() < 1e-12);
    }

    #[test]
    fn ppo_update_improves_surrogate_on_fixed_batch() {
        let (env, model) = chain_fixture();
        let mut agent = PolicyAgent::new(env.obs_dim(), &env.action_spec(), &[8], -0.5, 35).unwrap();
        let batch = prepared_batch(&env, &model, &agent, 62);
        let cfg = PolicyConfig {
            lr_theta: 1e-2,
            ppo_epochs: 1,
            minibatch_size: 1024,
            ..PolicyConfig::default()
        };
        let first = ppo_update(&mut agent, &batch, &cfg, 11).unwrap();
        let second = ppo_update(&mut agent, &batch, &cfg, 11).unwrap();
        assert!(
            second.actor_objective > first.actor_objective,
            "surrogate did not improve: {} -> {}",
            first.actor_objective,
            second.actor_objective
        );
    }

    /// The REINFORCE identity on the enumerable chain: the exact policy
    /// gradient of expected discounted cost (full trajectory enumeration)
    /// matches the Monte-Carlo estimate over 1e5 sampled trajectories within
    /// three standard errors, coordinate by coordinate.
    #[test]
    fn policy_gradient_matches_reinforce_monte_carlo() {
        let env = ChainHazard::new(ChainConfig::default()).unwrap();
        let mdp = env.to_tabular();
        let horizon = 3;
        let gamma = 0.99;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let logits: Vec<Vec<f64>> = (0..mdp.n_states)
            .map(|_| (0..mdp.n_actions).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        let policy = softmax_policy(&logits);
        let dim = mdp.n_states * mdp.n_actions;

        let mut exact = vec![0.0; dim];
        for (prob, steps) in mdp.enumerate_trajectories(&policy, horizon).unwrap() {
            let c = mdp.trajectory_cost(&steps, gamma);
            for &(s, a) in &steps {
                for j in 0..mdp.n_actions {
                    let indicator = if j == a { 1.0 } else { 0.0 };
                    exact[s * mdp.n_actions + j] += prob * c * (indicator - policy.probs[s][j]);
                }
            }
        }

        let m = 100_000;
        let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(m); dim];
        let mut score = vec![0.0; dim];
        for _ in 0..m {
            score.iter_mut().for_each(|x| *x = 0.0);
            let mut s = mdp.start;
            let mut c = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut a = mdp.n_actions - 1;
                for (j, p) in policy.probs[s].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        a = j;
                        break;
                    }
                }
                for j in 0..mdp.n_actions {
                    let indicator = if j == a { 1.0 } else { 0.0 };
                    score[s * mdp.n_actions + j] += indicator - policy.probs[s][j];
                }
                c += disc * mdp.cost[s][a];
                disc *= gamma;
                let v: f64 = rng.random();
                let mut acc2 = 0.0;
                let mut ns = s;
                for &(cand, p) in &mdp.transitions[s][a] {
                    acc2 += p;
                    if v < acc2 {
                        ns = cand;
                        break;
                    }
                }
                s = ns;
            }
            for i in 0..dim {
                per_coord[i].push(c * score[i]);
            }
        }
        for i in 0..dim {
            let est = mean(&per_coord[i]);
            let se = std_dev(&per_coord[i]) / (m as f64).sqrt();
            assert!(
                (est - exact[i]).abs() <= 3.0 * se + 1e-12,
                "coordinate {i}: exact {} vs MC {est} (se {se})",
                exact[i]
            );
        }
    }
}
