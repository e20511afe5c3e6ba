//! Trajectory container and JSONL persistence.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub obs: Vec<f64>,
    /// Action in feature form (one-hot for discrete, raw vector for boxes),
    /// i.e. exactly what the cost model consumes.
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_obs: Vec<f64>,
    pub seed: u64,
    /// Discount factor the generating environment evaluates costs under;
    /// stored so labels and metrics use the same cumulative-cost definition
    /// as the optimization objective. Missing in older files means 1.0
    /// (plain sums).
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Discounted cumulative cost, `sum_t gamma^t c_t`. Caller guarantees
    /// `gamma` lies in `(0, 1]`.
    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        debug_assert!(gamma > 0.0 && gamma <= 1.0);
        let mut acc = 0.0;
        let mut disc = 1.0;
        for s in &self.steps {
            acc += disc * s.cost;
            disc *= gamma;
        }
        acc
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        debug_assert!(gamma > 0.0 && gamma <= 1.0);
        let mut acc = 0.0;
        let mut disc = 1.0;
        for s in &self.steps {
            acc += disc * s.reward;
            disc *= gamma;
        }
        acc
    }

    /// Cumulative cost under the trajectory's own discount: the quantity the
    /// annotation oracle compares against the safety threshold, and the same
    /// functional the learned cost model estimates.
    pub fn cumulative_cost(&self) -> f64 {
        self.discounted_cost(self.gamma)
    }

    /// Raw (undiscounted) sum of per-step costs.
    pub fn episode_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.cost).collect()
    }

    /// SHA-256 of the canonical JSON encoding; stable identifier for dataset
    /// manifests.
    pub fn content_hash(&self) -> String {
        let encoded = serde_json::to_string(self).expect("trajectory serializes");
        sha256_hex(encoded.as_bytes())
    }
}

/// One JSON object per line.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| {
            Error::Serialization(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(t);
    }
    Ok(out)
}
