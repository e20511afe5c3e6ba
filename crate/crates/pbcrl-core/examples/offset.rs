//! Ad-hoc measurement: how the learned trajectory-cost clusters (never-cross
//! vs always-cross behavior) drift as pretraining epochs accumulate.

use pbcrl_core::config::parse_config_str;
use pbcrl_core::constraint::{pretrain_offline, CostModel, CostTrainConfig};
use pbcrl_core::env::{rollout, softmax_policy, ChainHazard, Environment};
use pbcrl_core::nn::{Activation, Network};
use pbcrl_core::pref::{build_offline_dataset, default_behavior_policies};
fn main() {
    let cfg = parse_config_str("").unwrap();
    let mut env = ChainHazard::new(cfg.env.chain.clone()).unwrap();
    let policies = default_behavior_policies(&env);
    let d = env.threshold();
    let dataset = build_offline_dataset(&mut env, &policies, 900, d, 11, 2000).unwrap();

    let n_s = env.obs_dim();
    let det = |a: usize| {
        let mut logits = vec![vec![0.0; 3]; n_s];
        for row in logits.iter_mut() {
            row[a] = 50.0;
        }
        softmax_policy(&logits)
    };
    let stay = det(1);
    let cross = det(2);

    for max_epochs in [5usize, 10, 20, 40, 80] {
        let feature_dim = env.obs_dim() + env.action_spec().feature_dim();
        let net = Network::new(&[feature_dim, 32, 1], Activation::Tanh, 7).unwrap();
        let init = CostModel::new(net, 1.0, env.gamma()).unwrap();
        let tcfg = CostTrainConfig {
            max_epochs,
            patience: max_epochs,
            seed: 13,
            ..CostTrainConfig::default()
        };
        let out = pretrain_offline(&dataset, init, &tcfg).unwrap();
        let (mut c_stay, mut c_cross) = (0.0, 0.0);
        let (mut t_stay, mut t_cross) = (0.0, 0.0);
        let k = 64u64;
        for i in 0..k {
            let ts = rollout(&mut env, &stay, 9000 + i).unwrap();
            let tc = rollout(&mut env, &cross, 7000 + i).unwrap();
            t_stay += ts.episode_cost() / k as f64;
            t_cross += tc.episode_cost() / k as f64;
            c_stay += out.model.traj_cost_estimate(&ts).unwrap() / k as f64;
            c_cross += out.model.traj_cost_estimate(&tc).unwrap() / k as f64;
        }
        let (mut d_safe, mut d_unsafe, mut n_safe, mut n_unsafe) = (0.0, 0.0, 0usize, 0usize);
        for r in dataset.records() {
            for (t, eps) in [(&r.traj_a, r.eps_a), (&r.traj_b, r.eps_b)] {
                let c = out.model.traj_cost_estimate(t).unwrap();
                if eps == 1 {
                    d_safe += c;
                    n_safe += 1;
                } else {
                    d_unsafe += c;
                    n_unsafe += 1;
                }
            }
        }
        println!(
            "epochs {max_epochs:3} (ran {:3}): true(stay,cross)=({t_stay:.2},{t_cross:.2}) \
             Chat(stay,cross)=({c_stay:8.3},{c_cross:8.3})  data safe {:.3} (n={n_safe}) unsafe {:.3} (n={n_unsafe})  holdout {:.3}",
            out.epochs_run,
            d_safe / n_safe as f64,
            d_unsafe / n_unsafe as f64,
            out.holdout_accuracy
        );
    }
}
