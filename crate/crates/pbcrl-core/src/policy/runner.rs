//! End-to-end training loop: offline pretraining of the cost model, then
//! iterated rollout collection, periodic online labeling + dead-zone
//! calibration + cost-model finetuning, PPO updates, and dual ascent on the
//! multiplier, with every iteration logged to the experiment report.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationMode, ExperimentConfig};
use crate::constraint::{
    calibrate_deadzone, finetune_online, predicted_violation_rate, pretrain_offline, CostModel,
    CostTrainConfig, EpochStats,
};
use crate::env::{rollout, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{bias_to_threshold, w2_distance, SampleSet, WINDOW_FRAC};
use crate::nn::{save_checkpoint, Activation, Network};
use crate::policy::{
    collect_rollouts, multiplier_update, ppo_update, prepare_advantages, PolicyAgent,
};
use crate::pref::{
    build_offline_dataset, default_behavior_policies, inject_label_noise, label_pair,
    PreferenceDataset, PreferenceRecord,
};
use crate::report::{final_window_mean, mid_window_mean, ExperimentReport, IterationRow, RunSummary};
use crate::util::split_seed;

/// Fixed evaluation set drawn from the behavior-policy mixture, used for
/// end-of-run distribution metrics. The same `eval_seed` yields the same set
/// across runs and ablations, making their W2 values comparable.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub trajectories: Vec<Trajectory>,
    /// Ground-truth discounted trajectory costs (same discounting as the
    /// learned estimates).
    pub true_costs: Vec<f64>,
}

impl EvalSet {
    pub fn build<E: Environment>(env: &E, n: usize, eval_seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty evaluation set".into()));
        }
        let policies = default_behavior_policies(env);
        let mut trajectories = Vec::with_capacity(n);
        let mut true_costs = Vec::with_capacity(n);
        for i in 0..n {
            let policy = &policies[i % policies.len()];
            let mut e = env.clone();
            let traj = rollout(&mut e, policy.as_ref(), split_seed(eval_seed, i as u64))?;
            true_costs.push(traj.cumulative_cost());
            trajectories.push(traj);
        }
        Ok(EvalSet {
            trajectories,
            true_costs,
        })
    }

    /// Raw and z-score-normalized W2 between the ground-truth cost
    /// distribution and the model's estimates on this set.
    pub fn w2_against(&self, model: &CostModel) -> Result<(f64, f64)> {
        let mut estimates = Vec::with_capacity(self.trajectories.len());
        for t in &self.trajectories {
            estimates.push(model.traj_cost_estimate(t)?);
        }
        let truth = SampleSet::new("true-cost", self.true_costs.clone())?;
        let learned = SampleSet::new("learned-cost", estimates)?;
        let raw = w2_distance(&truth, &learned);
        let normalized = w2_distance(&truth.normalized(), &learned.normalized());
        Ok((raw, normalized))
    }
}

/// Label `pairs` fresh on-policy trajectories, each paired against a
/// trajectory sampled from the existing dataset. Pairing against the
/// offline backbone keeps every query sigmoid-active: pairs of two
/// same-behavior rollouts are near-ties and carry almost no ordering
/// gradient, which lets the safe cluster drift away from the calibrated
/// boundary over successive finetuning events. Labels are optionally
/// corrupted at the configured noise rate.
fn label_online_batch<E: Environment>(
    env: &E,
    agent: &PolicyAgent,
    model: &CostModel,
    dataset: &PreferenceDataset,
    pairs: usize,
    noise_rate: f64,
    seed: u64,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Vec<PreferenceRecord>> {
    let batch = collect_rollouts(env, agent, model, pairs, seed)?;
    let mut pick = ChaCha8Rng::seed_from_u64(split_seed(seed, 1));
    let records_pool = dataset.records();
    let mut records = Vec::with_capacity(pairs);
    for fresh in batch.trajectories {
        let i = pick.random_range(0..2 * records_pool.len());
        let anchor = if i % 2 == 0 {
            records_pool[i / 2].traj_a.clone()
        } else {
            records_pool[i / 2].traj_b.clone()
        };
        let mut record = label_pair(fresh, anchor, env.threshold())?;
        if noise_rate > 0.0 {
            record = inject_label_noise(record, noise_rate, noise_rng)?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Artifacts of the offline stage: the pretrained cost model with its
/// training curve, the preference dataset (which carries the remaining
/// online budget), the resolved trainer settings, and the label-noise
/// stream positioned for the online phase to continue.
#[derive(Clone, Debug)]
pub struct PretrainArtifacts {
    pub model: CostModel,
    pub curve: Vec<EpochStats>,
    pub holdout_accuracy: f64,
    pub epochs_run: usize,
    pub dataset: PreferenceDataset,
    pub train_cfg: CostTrainConfig,
    pub noise_rng: ChaCha8Rng,
}

/// Stage one in isolation: draw the offline preference dataset from the
/// behavior-policy mixture (optionally corrupting labels at the configured
/// noise rate) and pretrain the cost model on it.
pub fn pretrain_stage<E: Environment>(
    env: &E,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<PretrainArtifacts> {
    config.validate()?;
    let (offline_budget, _online_budget) = config.effective_budget();
    let (delta_init, zeta) = config.effective_delta_zeta();
    let d = env.threshold();

    let policies = default_behavior_policies(env);
    let mut dataset = {
        let mut e = env.clone();
        build_offline_dataset(
            &mut e,
            &policies,
            offline_budget,
            d,
            split_seed(seed, 1),
            config.budget.total,
        )?
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 5));
    if config.ablation.noise_rate > 0.0 {
        dataset.inject_noise(config.ablation.noise_rate, &mut noise_rng)?;
    }
    let feature_dim = env.obs_dim() + env.action_spec().feature_dim();
    let mut cost_sizes = vec![feature_dim];
    cost_sizes.extend_from_slice(&config.cost_model.hidden);
    cost_sizes.push(1);
    let cost_net = Network::new(&cost_sizes, Activation::Tanh, split_seed(seed, 2))?;
    let init = CostModel::new(cost_net, delta_init, env.gamma())?;
    let mut train_cfg = config.cost_model.train_config(split_seed(seed, 3));
    train_cfg.zeta = zeta;
    let pretrained = pretrain_offline(&dataset, init, &train_cfg)?;
    Ok(PretrainArtifacts {
        model: pretrained.model,
        curve: pretrained.curve,
        holdout_accuracy: pretrained.holdout_accuracy,
        epochs_run: pretrained.epochs_run,
        dataset,
        train_cfg,
        noise_rng,
    })
}

/// Run the full two-stage method for one seed and return its report.
///
/// Stage one pretrains the cost model on an offline preference dataset built
/// from the behavior-policy mixture. Stage two iterates: collect on-policy
/// rollouts; on every `finetune_interval`-th iteration (including iteration
/// 0) label a fresh batch, recalibrate the dead zone against the observed
/// violation rate, and finetune the cost model; update the policy and critics
/// by clipped-surrogate PPO on the combined advantage; update the multiplier
/// by dual ascent on the mean estimated cost. Ablations reduce the loss
/// (plain pairwise), freeze the cost model after pretraining (offline-only),
/// or corrupt oracle labels (noise).
///
/// When the online budget runs out, labeling and finetuning stop while
/// policy optimization continues. If `out_dir` is given, actor and
/// cost-model checkpoints are written there at the configured interval.
pub fn run_pbcrl<E: Environment>(
    env: &E,
    config: &ExperimentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    let d = env.threshold();
    let gamma = env.gamma();
    let (offline_budget, _online_budget) = config.effective_budget();

    let PretrainArtifacts {
        mut model,
        curve: _,
        holdout_accuracy,
        epochs_run,
        mut dataset,
        train_cfg,
        mut noise_rng,
    } = pretrain_stage(env, config, seed)?;

    let mut agent = PolicyAgent::new(
        env.obs_dim(),
        &env.action_spec(),
        &config.policy.hidden,
        config.policy.log_std_init,
        split_seed(seed, 4),
    )?;

    // Stage two: policy optimization with periodic online maintenance.
    let pcfg = &config.policy;
    let mut rows = Vec::with_capacity(pcfg.iterations);
    let mut finetune_events = 0usize;
    for n in 0..pcfg.iterations {
        let mut batch = collect_rollouts(
            env,
            &agent,
            &model,
            pcfg.rollouts_per_iter,
            split_seed(seed, 1000 + n as u64),
        )?;

        let online_due =
            n % pcfg.finetune_interval == 0 && config.ablation.mode != AblationMode::OfflineOnly;
        if online_due && dataset.remaining() > 0 {
            let pairs = config.budget.online_pairs_per_event.min(dataset.remaining());
            let records = label_online_batch(
                env,
                &agent,
                &model,
                &dataset,
                pairs,
                config.ablation.noise_rate,
                split_seed(seed, 3000 + n as u64),
                &mut noise_rng,
            )?;
            if config.ablation.mode != AblationMode::PlainBt {
                let labeled: Vec<(Trajectory, u8)> = records
                    .iter()
                    .flat_map(|r| {
                        [(r.traj_a.clone(), r.eps_a), (r.traj_b.clone(), r.eps_b)]
                    })
                    .collect();
                let delta = calibrate_deadzone(&model, &labeled, pcfg.lr_delta)?;
                model.set_delta(delta)?;
            }
            finetune_online(&mut model, records, n, &mut dataset, &train_cfg)?;
            finetune_events += 1;
        }

        prepare_advantages(&agent, &mut batch, gamma, pcfg.gae_lambda)?;
        let stats = ppo_update(&mut agent, &batch, pcfg, split_seed(seed, 2000 + n as u64))?;
        let mean_learned = batch.mean_learned_cost(&model)?;
        agent.lambda = multiplier_update(agent.lambda, mean_learned, pcfg.lr_lambda);

        let k = batch.trajectories.len() as f64;
        let return_true = batch
            .trajectories
            .iter()
            .map(|t| t.episode_return())
            .sum::<f64>()
            / k;
        let cost_true = batch
            .trajectories
            .iter()
            .map(|t| t.cumulative_cost())
            .sum::<f64>()
            / k;
        let violation_rate_true = batch
            .trajectories
            .iter()
            .filter(|t| t.cumulative_cost() > d)
            .count() as f64
            / k;
        rows.push(IterationRow {
            iteration: n,
            return_true,
            cost_true,
            cost_learned: mean_learned,
            lambda: agent.lambda,
            delta: model.delta(),
            violation_rate_true,
            violation_rate_pred: predicted_violation_rate(&model, &batch.trajectories)?,
            entropy: stats.mean_entropy,
        });

        if pcfg.checkpoint_interval > 0 && n % pcfg.checkpoint_interval == 0 {
            if let Some(dir) = out_dir {
                write_checkpoints(dir, &agent, &model, n)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_checkpoints(dir, &agent, &model, pcfg.iterations)?;
    }

    let eval = EvalSet::build(env, pcfg.eval_rollouts, config.run.eval_seed)?;
    let (w2_raw, w2_normalized) = eval.w2_against(&model)?;
    let cost_final = final_window_mean(&rows, WINDOW_FRAC, |r| r.cost_true);
    let summary = RunSummary {
        env: env.name().to_string(),
        seed,
        label: config.label(),
        config_hash: config.content_hash()?,
        iterations: pcfg.iterations,
        return_mid: mid_window_mean(&rows, WINDOW_FRAC, |r| r.return_true),
        cost_mid: mid_window_mean(&rows, WINDOW_FRAC, |r| r.cost_true),
        return_final: final_window_mean(&rows, WINDOW_FRAC, |r| r.return_true),
        cost_final,
        bias_final: bias_to_threshold(cost_final, d),
        w2_raw,
        w2_normalized,
        holdout_accuracy,
        pretrain_epochs: epochs_run,
        finetune_events,
        online_queries_used: dataset.queries_used() - offline_budget,
        budget_exhausted: dataset.remaining() == 0,
        lambda_final: agent.lambda,
        delta_final: model.delta(),
    };
    Ok(ExperimentReport { rows, summary })
}

fn write_checkpoints(
    dir: &Path,
    agent: &PolicyAgent,
    model: &CostModel,
    iteration: usize,
) -> Result<()> {
    let ck = dir.join("checkpoints");
    std::fs::create_dir_all(&ck)?;
    let meta = serde_json::json!({ "iteration": iteration, "lambda": agent.lambda });
    save_checkpoint(&agent.actor, &ck.join(format!("actor_{iteration:05}.bin")), &meta)?;
    model.save(&ck.join(format!("cost_{iteration:05}.bin")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationMode, BudgetSection, ExperimentConfig};
    use crate::env::{ChainConfig, ChainHazard};

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.budget = BudgetSection {
            total: 48,
            offline: 40,
            online: 8,
            online_pairs_per_event: 4,
        };
        cfg.cost_model.hidden = vec![8];
        cfg.cost_model.max_epochs = 4;
        cfg.cost_model.patience = 2;
        cfg.cost_model.batch_size = 16;
        cfg.policy.iterations = 4;
        cfg.policy.finetune_interval = 2;
        cfg.policy.rollouts_per_iter = 4;
        cfg.policy.ppo_epochs = 2;
        cfg.policy.minibatch_size = 64;
        cfg.policy.hidden = vec![8];
        cfg.policy.eval_rollouts = 12;
        cfg.validate().unwrap();
        cfg
    }

    fn chain_env() -> ChainHazard {
        ChainHazard::new(ChainConfig::default()).unwrap()
    }

    #[test]
    fn full_run_is_deterministic_and_accounts_for_budget() {
        let cfg = tiny_config();
        let env = chain_env();
        let a = run_pbcrl(&env, &cfg, 7, None).unwrap();
        let b = run_pbcrl(&env, &cfg, 7, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        // Online events at n = 0 and n = 2 spend 4 pairs each.
        assert_eq!(a.summary.finetune_events, 2);
        assert_eq!(a.summary.online_queries_used, 8);
        assert!(a.summary.budget_exhausted);
        assert_eq!(a.summary.env, "chain-hazard");
        assert_eq!(a.summary.label, "full");
        for row in &a.rows {
            assert!(row.lambda >= 0.0);
            assert!(row.delta >= 0.0);
            assert!(row.return_true.is_finite());
            assert!(row.cost_learned.is_finite());
            assert!((0.0..=1.0).contains(&row.violation_rate_true));
            assert!((0.0..=1.0).contains(&row.violation_rate_pred));
        }
        assert!(a.summary.w2_raw >= 0.0);
        assert!(a.summary.w2_normalized.is_finite());
        assert!((0.0..=1.0).contains(&a.summary.holdout_accuracy));
        // Different seed, different run.
        let c = run_pbcrl(&env, &cfg, 8, None).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn interval_beyond_iterations_finetunes_exactly_once() {
        let mut cfg = tiny_config();
        cfg.policy.iterations = 2;
        cfg.policy.finetune_interval = 5;
        let report = run_pbcrl(&chain_env(), &cfg, 3, None).unwrap();
        assert_eq!(report.summary.finetune_events, 1);
        assert_eq!(report.summary.online_queries_used, 4);
    }

    #[test]
    fn zero_iterations_yield_pretraining_only_report() {
        let mut cfg = tiny_config();
        cfg.policy.iterations = 0;
        let report = run_pbcrl(&chain_env(), &cfg, 3, None).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.summary.finetune_events, 0);
        assert_eq!(report.summary.online_queries_used, 0);
        assert!(report.summary.pretrain_epochs > 0);
        assert!(report.summary.w2_raw.is_finite());
    }

    #[test]
    fn exhausted_budget_stops_finetuning_but_not_training() {
        let mut cfg = tiny_config();
        cfg.budget.online = 4;
        cfg.budget.total = 44;
        cfg.policy.finetune_interval = 1;
        cfg.policy.iterations = 3;
        let report = run_pbcrl(&chain_env(), &cfg, 5, None).unwrap();
        // Only the first event fits the online budget; training continues.
        assert_eq!(report.summary.finetune_events, 1);
        assert!(report.summary.budget_exhausted);
        assert_eq!(report.rows.len(), 3);
    }

    #[test]
    fn plain_bt_ablation_keeps_zero_dead_zone() {
        let mut cfg = tiny_config();
        cfg.ablation.mode = AblationMode::PlainBt;
        let report = run_pbcrl(&chain_env(), &cfg, 5, None).unwrap();
        assert_eq!(report.summary.label, "plain-bt");
        assert_eq!(report.summary.delta_final, 0.0);
        assert!(report.rows.iter().all(|r| r.delta == 0.0));
        // Online finetuning still runs under plain pairwise training.
        assert_eq!(report.summary.finetune_events, 2);
    }

    #[test]
    fn offline_only_ablation_never_finetunes() {
        let mut cfg = tiny_config();
        cfg.ablation.mode = AblationMode::OfflineOnly;
        let report = run_pbcrl(&chain_env(), &cfg, 5, None).unwrap();
        assert_eq!(report.summary.finetune_events, 0);
        assert_eq!(report.summary.online_queries_used, 0);
        // The whole budget went into pretraining.
        assert!(report.summary.budget_exhausted);
        // Dead zone stays at its initial value without calibration.
        assert!(report
            .rows
            .iter()
            .all(|r| r.delta == cfg.cost_model.delta_init));
    }

    #[test]
    fn checkpoints_are_written_at_the_configured_interval() {
        let dir = std::env::temp_dir().join(format!("pbcrl-run-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let mut cfg = tiny_config();
        cfg.policy.checkpoint_interval = 2;
        run_pbcrl(&chain_env(), &cfg, 5, Some(&dir)).unwrap();
        let ck = dir.join("checkpoints");
        for name in [
            "actor_00000.bin",
            "actor_00002.bin",
            "actor_00004.bin",
            "cost_00004.bin",
        ] {
            assert!(ck.join(name).is_file(), "missing {name}");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn eval_set_is_reproducible_and_scores_models() {
        let env = chain_env();
        let a = EvalSet::build(&env, 10, 123).unwrap();
        let b = EvalSet::build(&env, 10, 123).unwrap();
        for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(x.content_hash(), y.content_hash());
        }
        assert_eq!(a.true_costs, b.true_costs);
        let other = EvalSet::build(&env, 10, 124).unwrap();
        assert_ne!(
            a.trajectories[0].content_hash(),
            other.trajectories[0].content_hash()
        );
    }
}
