//! Ad-hoc: histogram of true episode costs in the offline preference dataset,
//! and the pretrained model's learned cost vs true cost near the boundary.

use pbcrl_core::config::parse_config_str;
use pbcrl_core::env::{ChainHazard, Environment};
use pbcrl_core::policy::pretrain_stage;

fn main() {
    let cfg = parse_config_str("").unwrap();
    let env = ChainHazard::new(cfg.env.chain.clone()).unwrap();
    let art = pretrain_stage(&env, &cfg, 1).unwrap();

    let mut buckets = [0usize; 12];
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for r in art.dataset.records() {
        for t in [&r.traj_a, &r.traj_b] {
            let c = t.episode_cost();
            let b = (c as usize).min(buckets.len() - 1);
            buckets[b] += 1;
            pairs.push((c, art.model.traj_cost_estimate(t).unwrap()));
        }
    }
    println!("episode-cost histogram (bucket = floor(cost), last = 11+):");
    for (i, n) in buckets.iter().enumerate() {
        println!("  {i:>2}: {n}");
    }
    // Mean learned cost per true-cost bucket: where does the zero-crossing sit?
    let mut sums = vec![(0.0, 0usize); 12];
    for (c, l) in &pairs {
        let b = (*c as usize).min(11);
        sums[b].0 += l;
        sums[b].1 += 1;
    }
    println!("mean learned cost by true-cost bucket:");
    for (i, (s, n)) in sums.iter().enumerate() {
        if *n > 0 {
            println!("  {i:>2}: {:8.3}  (n={n})", s / *n as f64);
        }
    }
}
