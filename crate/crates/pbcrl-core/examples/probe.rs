//! Ad-hoc inspection of saved checkpoints: per-state-action learned costs
//! and the actor's action distribution per state.

use pbcrl_core::constraint::CostModel;
use pbcrl_core::nn::load_checkpoint;

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn main() {
    let dir = std::env::args().nth(1).expect("usage: probe <checkpoint-dir> <iter>");
    let iter: usize = std::env::args().nth(2).expect("iter").parse().unwrap();
    let model = CostModel::load(std::path::Path::new(&format!("{dir}/cost_{iter:05}.bin"))).unwrap();
    let (actor, _meta) =
        load_checkpoint(std::path::Path::new(&format!("{dir}/actor_{iter:05}.bin"))).unwrap();
    let n_states = 8;
    let n_actions = 3;
    println!("learned step costs c(s,a) [rows=states, cols=left/stay/right]:");
    for s in 0..n_states {
        let obs = one_hot(s, n_states);
        let mut row = String::new();
        for a in 0..n_actions {
            let feat = one_hot(a, n_actions);
            let c = model.step_cost(&obs, &feat).unwrap();
            row.push_str(&format!("{c:8.3} "));
        }
        println!("s={s}: {row}");
    }
    println!("\nactor policy pi(a|s):");
    for s in 0..n_states {
        let obs = one_hot(s, n_states);
        let out = actor.forward(&obs).unwrap();
        let lse = {
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + out.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
        };
        let probs: Vec<f64> = out.iter().map(|z| (z - lse).exp()).collect();
        println!(
            "s={s}: left={:.4} stay={:.4} right={:.4}",
            probs[0], probs[1], probs[2]
        );
    }
}
