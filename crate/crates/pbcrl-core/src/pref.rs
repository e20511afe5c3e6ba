//! Preference dataset: oracle labeling, label noise, and the query budget.
//!
//! A simulated annotator compares discounted cumulative episode costs to
//! produce preference weights (mu_a, mu_b) and per-trajectory safety bits.
//! Every labeled record counts against a fixed query budget; the counter
//! only grows.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::env::{rollout, Environment, Policy, Trajectory, UniformRandomPolicy};
use crate::error::{Error, Result};
use crate::util::{sha256_hex, split_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub traj_a: Trajectory,
    pub traj_b: Trajectory,
    /// Preference weights; mu_a + mu_b = 1, each in {0, 0.5, 1}.
    pub mu_a: f64,
    pub mu_b: f64,
    pub eps_a: u8,
    pub eps_b: u8,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        let mu_ok = [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)]
            .iter()
            .any(|&(a, b)| self.mu_a == a && self.mu_b == b);
        if !mu_ok {
            return Err(Error::InvalidArgument(format!(
                "preference weights ({}, {}) not in {{(1,0),(0,1),(0.5,0.5)}}",
                self.mu_a, self.mu_b
            )));
        }
        if self.eps_a > 1 || self.eps_b > 1 {
            return Err(Error::InvalidArgument("safety labels must be 0/1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum Provenance {
    Offline,
    Online { iteration: usize },
}

#[derive(Clone, Debug)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    provenance: Vec<Provenance>,
    budget: usize,
    used: usize,
}

impl PreferenceDataset {
    pub fn new(budget: usize) -> Self {
        PreferenceDataset {
            records: Vec::new(),
            provenance: Vec::new(),
            budget,
            used: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn queries_used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    /// Appends one labeled record, consuming one query.
    pub fn push_labeled(&mut self, record: PreferenceRecord, prov: Provenance) -> Result<()> {
        record.validate()?;
        if self.used + 1 > self.budget {
            return Err(Error::BudgetExhausted {
                used: self.used,
                budget: self.budget,
                requested: 1,
            });
        }
        self.used += 1;
        self.records.push(record);
        self.provenance.push(prov);
        Ok(())
    }

    /// All-or-nothing append of a labeled batch.
    pub fn extend_labeled(
        &mut self,
        records: Vec<PreferenceRecord>,
        prov: Provenance,
    ) -> Result<()> {
        if self.used + records.len() > self.budget {
            return Err(Error::BudgetExhausted {
                used: self.used,
                budget: self.budget,
                requested: records.len(),
            });
        }
        for r in records {
            self.push_labeled(r, prov)?;
        }
        Ok(())
    }

    pub fn both_classes_present(&self) -> bool {
        let mut safe = false;
        let mut unsafe_ = false;
        for r in &self.records {
            safe |= r.eps_a == 1 || r.eps_b == 1;
            unsafe_ |= r.eps_a == 0 || r.eps_b == 0;
        }
        safe && unsafe_
    }

    /// Applies [`inject_label_noise`] to every record in place. Does not
    /// consume queries: noise corrupts answers, it does not ask new ones.
    pub fn inject_noise(&mut self, rate: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        for r in &mut self.records {
            *r = inject_label_noise(r.clone(), rate, rng)?;
        }
        Ok(())
    }
}

/// Compares discounted cumulative costs (each trajectory under its own
/// recorded discount): strictly cheaper wins (1, 0), ties get the symmetric
/// label (0.5, 0.5). `d` is carried for interface symmetry with the safety
/// oracle and only sanity-checked.
pub fn oracle_label_pair(a: &Trajectory, b: &Trajectory, d: f64) -> Result<(f64, f64)> {
    debug_assert!(d >= 0.0);
    debug_assert!(
        (a.gamma - b.gamma).abs() < 1e-12,
        "comparing trajectories generated under different discounts"
    );
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot compare trajectories of different horizons ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let ca = a.cumulative_cost();
    let cb = b.cumulative_cost();
    Ok(if ca < cb {
        (1.0, 0.0)
    } else if ca > cb {
        (0.0, 1.0)
    } else {
        (0.5, 0.5)
    })
}

/// Safety bit: 1 iff the discounted cumulative cost is at most `d`
/// (inclusive).
pub fn oracle_label_safety(t: &Trajectory, d: f64) -> u8 {
    debug_assert!(d >= 0.0);
    u8::from(t.cumulative_cost() <= d)
}

/// Labels a fresh pair with both oracles.
pub fn label_pair(a: Trajectory, b: Trajectory, d: f64) -> Result<PreferenceRecord> {
    let (mu_a, mu_b) = oracle_label_pair(&a, &b, d)?;
    let eps_a = oracle_label_safety(&a, d);
    let eps_b = oracle_label_safety(&b, d);
    Ok(PreferenceRecord {
        traj_a: a,
        traj_b: b,
        mu_a,
        mu_b,
        eps_a,
        eps_b,
    })
}

/// With probability `rate` the preference pair is swapped; each safety bit
/// flips independently with the same probability.
pub fn inject_label_noise(
    mut record: PreferenceRecord,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PreferenceRecord> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "noise rate must lie in [0, 1), got {rate}"
        )));
    }
    if rng.random::<f64>() < rate {
        std::mem::swap(&mut record.mu_a, &mut record.mu_b);
    }
    if rng.random::<f64>() < rate {
        record.eps_a ^= 1;
    }
    if rng.random::<f64>() < rate {
        record.eps_b ^= 1;
    }
    Ok(record)
}

/// Greedy-to-goal chain policy with epsilon-uniform noise: mostly presses
/// right, so it crosses the hazard segment and generates unsafe episodes.
#[derive(Clone, Debug)]
pub struct ChainRightPolicy {
    pub epsilon: f64,
}

impl Policy for ChainRightPolicy {
    fn act(&self, _obs: &[f64], rng: &mut ChaCha8Rng) -> crate::env::Action {
        if rng.random::<f64>() < self.epsilon {
            crate::env::Action::Discrete(rng.random_range(0..3))
        } else {
            crate::env::Action::Discrete(2)
        }
    }
}

/// Safe chain heuristic: walks right until just before the hazard segment,
/// then holds position (with a little noise).
#[derive(Clone, Debug)]
pub struct ChainCautiousPolicy {
    pub hazard_start: usize,
    pub epsilon: f64,
}

impl Policy for ChainCautiousPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> crate::env::Action {
        if rng.random::<f64>() < self.epsilon {
            return crate::env::Action::Discrete(rng.random_range(0..3));
        }
        let s = obs
            .iter()
            .position(|&x| x == 1.0)
            .unwrap_or(0);
        if s + 1 < self.hazard_start {
            crate::env::Action::Discrete(2)
        } else {
            crate::env::Action::Discrete(0)
        }
    }
}

/// Proportional goal-seeker for the point environment; drives straight at the
/// goal direction encoded in the observation tail.
#[derive(Clone, Debug)]
pub struct PointSeekPolicy {
    pub epsilon: f64,
}

impl Policy for PointSeekPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> crate::env::Action {
        if rng.random::<f64>() < self.epsilon {
            return crate::env::Action::Continuous(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
        }
        let norm = (obs[4] * obs[4] + obs[5] * obs[5]).sqrt().max(1e-9);
        crate::env::Action::Continuous(vec![obs[4] / norm, obs[5] / norm])
    }
}

/// Seeded mixture of uniform-random and noisy-greedy behavior for dataset
/// construction: spans both safety classes on the default configs.
pub fn default_behavior_policies<E: Environment>(env: &E) -> Vec<Box<dyn Policy>> {
    let uniform = UniformRandomPolicy {
        spec: env.action_spec(),
    };
    match env.name() {
        "chain-hazard" => vec![
            Box::new(uniform),
            Box::new(ChainRightPolicy { epsilon: 0.2 }),
            Box::new(ChainCautiousPolicy {
                hazard_start: 4,
                epsilon: 0.1,
            }),
        ],
        _ => vec![
            Box::new(uniform),
            Box::new(PointSeekPolicy { epsilon: 0.1 }),
            Box::new(PointSeekPolicy { epsilon: 0.5 }),
        ],
    }
}

const CLASS_RESAMPLE_ATTEMPTS: usize = 64;

/// Rolls `n_pairs` trajectory pairs from the behavior mixture, ensures both
/// safety classes appear (bounded resampling), then labels everything with
/// the noise-free oracle into a fresh dataset carrying `budget`.
pub fn build_offline_dataset<E: Environment>(
    env: &mut E,
    behavior_policies: &[Box<dyn Policy>],
    n_pairs: usize,
    d: f64,
    seed: u64,
    budget: usize,
) -> Result<PreferenceDataset> {
    if behavior_policies.is_empty() {
        return Err(Error::InvalidArgument("behavior mixture is empty".into()));
    }
    let mut dataset = PreferenceDataset::new(budget);
    if n_pairs > dataset.remaining() {
        return Err(Error::BudgetExhausted {
            used: 0,
            budget,
            requested: n_pairs,
        });
    }
    if n_pairs == 0 {
        return Ok(dataset);
    }

    let mut pick = ChaCha8Rng::seed_from_u64(split_seed(seed, 0));
    let roll_one = |env: &mut E, pick: &mut ChaCha8Rng, stream: u64| -> Result<Trajectory> {
        let p = &behavior_policies[pick.random_range(0..behavior_policies.len())];
        rollout(env, p.as_ref(), split_seed(seed, stream))
    };

    let mut pairs = Vec::with_capacity(n_pairs);
    let mut stream = 1u64;
    for _ in 0..n_pairs {
        let a = roll_one(env, &mut pick, stream)?;
        let b = roll_one(env, &mut pick, stream + 1)?;
        stream += 2;
        pairs.push((a, b));
    }

    let classes = |pairs: &[(Trajectory, Trajectory)]| {
        let mut safe = false;
        let mut unsafe_ = false;
        for (a, b) in pairs {
            for t in [a, b] {
                if oracle_label_safety(t, d) == 1 {
                    safe = true;
                } else {
                    unsafe_ = true;
                }
            }
        }
        (safe, unsafe_)
    };

    let mut attempts = 0;
    loop {
        let (safe, unsafe_) = classes(&pairs);
        if safe && unsafe_ {
            break;
        }
        if attempts >= CLASS_RESAMPLE_ATTEMPTS {
            return Err(Error::DegenerateData(format!(
                "only one safety class after {CLASS_RESAMPLE_ATTEMPTS} resampling rounds \
                 (threshold {d}); environment config looks degenerate"
            )));
        }
        let a = roll_one(env, &mut pick, stream)?;
        let b = roll_one(env, &mut pick, stream + 1)?;
        stream += 2;
        pairs[attempts % n_pairs] = (a, b);
        attempts += 1;
    }

    for (a, b) in pairs {
        dataset.push_labeled(label_pair(a, b, d)?, Provenance::Offline)?;
    }
    Ok(dataset)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub budget: usize,
    pub queries_used: usize,
    pub n_records: usize,
    pub seed: u64,
    pub env_config_hash: String,
    pub records_hash: String,
}

#[derive(Serialize, Deserialize)]
struct RecordRow {
    a: String,
    b: String,
    mu_a: f64,
    mu_b: f64,
    eps_a: u8,
    eps_b: u8,
    provenance: Provenance,
}

/// Writes `trajectories.jsonl` (deduplicated by content hash),
/// `records.jsonl` (hash references plus labels), and `manifest.json`.
pub fn save_dataset(
    dir: &Path,
    dataset: &PreferenceDataset,
    seed: u64,
    env_config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut unique: Vec<(String, &Trajectory)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in dataset.records() {
        for t in [&r.traj_a, &r.traj_b] {
            let h = t.content_hash();
            if seen.insert(h.clone()) {
                unique.push((h, t));
            }
        }
    }
    let mut tw = BufWriter::new(fs::File::create(dir.join("trajectories.jsonl"))?);
    for (h, t) in &unique {
        serde_json::to_writer(&mut tw, &json!({"hash": h, "trajectory": t}))?;
        tw.write_all(b"\n")?;
    }
    tw.flush()?;

    let mut body = Vec::new();
    {
        let mut rw = BufWriter::new(&mut body);
        for (r, prov) in dataset.records().iter().zip(dataset.provenance()) {
            let row = RecordRow {
                a: r.traj_a.content_hash(),
                b: r.traj_b.content_hash(),
                mu_a: r.mu_a,
                mu_b: r.mu_b,
                eps_a: r.eps_a,
                eps_b: r.eps_b,
                provenance: *prov,
            };
            serde_json::to_writer(&mut rw, &row)?;
            rw.write_all(b"\n")?;
        }
        rw.flush()?;
    }
    fs::write(dir.join("records.jsonl"), &body)?;

    let manifest = DatasetManifest {
        budget: dataset.budget(),
        queries_used: dataset.queries_used(),
        n_records: dataset.len(),
        seed,
        env_config_hash: env_config_hash.to_string(),
        records_hash: sha256_hex(&body),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reloads a dataset directory, verifying hash references and the manifest's
/// record digest.
pub fn load_dataset(dir: &Path) -> Result<(PreferenceDataset, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut trajs = std::collections::HashMap::new();
    let tr = BufReader::new(fs::File::open(dir.join("trajectories.jsonl"))?);
    for line in tr.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let hash = v["hash"]
            .as_str()
            .ok_or_else(|| Error::Serialization("trajectory row missing hash".into()))?
            .to_string();
        let t: Trajectory = serde_json::from_value(v["trajectory"].clone())?;
        if t.content_hash() != hash {
            return Err(Error::Serialization(format!(
                "trajectory hash mismatch for {hash}"
            )));
        }
        trajs.insert(hash, t);
    }

    let body = fs::read(dir.join("records.jsonl"))?;
    if sha256_hex(&body) != manifest.records_hash {
        return Err(Error::Serialization(
            "records.jsonl does not match manifest digest".into(),
        ));
    }
    let mut dataset = PreferenceDataset::new(manifest.budget);
    for line in body.split(|&b| b == b'\n') {
        if line.is_empty() {
            continue;
        }
        let row: RecordRow = serde_json::from_slice(line)?;
        let lookup = |h: &str| {
            trajs
                .get(h)
                .cloned()
                .ok_or_else(|| Error::Serialization(format!("dangling trajectory ref {h}")))
        };
        dataset.push_labeled(
            PreferenceRecord {
                traj_a: lookup(&row.a)?,
                traj_b: lookup(&row.b)?,
                mu_a: row.mu_a,
                mu_b: row.mu_b,
                eps_a: row.eps_a,
                eps_b: row.eps_b,
            },
            row.provenance,
        )?;
    }
    Ok((dataset, manifest))
}
