//! Run artifacts: per-iteration CSV rows and the JSON run summary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ITERATION_CSV_HEADER: &str =
    "iteration,return_true,cost_true,cost_learned,lambda,delta,violation_rate_true,violation_rate_pred,entropy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    /// Mean undiscounted episode return over the iteration's rollouts.
    pub return_true: f64,
    /// Mean undiscounted episode cost (ground truth).
    pub cost_true: f64,
    /// Mean learned discounted trajectory cost.
    pub cost_learned: f64,
    pub lambda: f64,
    pub delta: f64,
    pub violation_rate_true: f64,
    pub violation_rate_pred: f64,
    /// Mean policy entropy over the iteration's PPO samples (nats); tracks
    /// how close the actor is to determinism.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub seed: u64,
    /// Configuration label used for grouping in ablation tables
    /// (e.g. "full", "plain-bt", "offline-only", "delta-0.5").
    pub label: String,
    pub config_hash: String,
    pub iterations: usize,
    pub return_mid: f64,
    pub cost_mid: f64,
    pub return_final: f64,
    pub cost_final: f64,
    /// |final true cost - threshold|.
    pub bias_final: f64,
    /// W2 between ground-truth and learned cost samples on the fixed
    /// evaluation set, raw and z-score-normalized.
    pub w2_raw: f64,
    pub w2_normalized: f64,
    pub holdout_accuracy: f64,
    pub pretrain_epochs: usize,
    pub finetune_events: usize,
    pub online_queries_used: usize,
    pub budget_exhausted: bool,
    pub lambda_final: f64,
    pub delta_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<IterationRow>,
    pub summary: RunSummary,
}

/// Mean of `f` over the last `frac` of iterations (at least one row).
pub fn final_window_mean(rows: &[IterationRow], frac: f64, f: impl Fn(&IterationRow) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let n = ((rows.len() as f64 * frac).ceil() as usize).clamp(1, rows.len());
    let tail = &rows[rows.len() - n..];
    tail.iter().map(&f).sum::<f64>() / n as f64
}

/// Mean of `f` over a window of the same width centered mid-training.
pub fn mid_window_mean(rows: &[IterationRow], frac: f64, f: impl Fn(&IterationRow) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let n = ((rows.len() as f64 * frac).ceil() as usize).clamp(1, rows.len());
    let mid = rows.len() / 2;
    let start = mid.saturating_sub(n / 2).min(rows.len() - n);
    let win = &rows[start..start + n];
    win.iter().map(&f).sum::<f64>() / n as f64
}

impl ExperimentReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = String::from(ITERATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.return_true,
                r.cost_true,
                r.cost_learned,
                r.lambda,
                r.delta,
                r.violation_rate_true,
                r.violation_rate_pred,
                r.entropy
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }

    /// Reads rows back from the CSV written by [`ExperimentReport::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Vec<IterationRow>> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == ITERATION_CSV_HEADER => {}
            other => {
                return Err(Error::Serialization(format!(
                    "unexpected iteration CSV header: {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 9 {
                return Err(Error::Serialization(format!(
                    "{}:{}: expected 9 columns, got {}",
                    path.display(),
                    i + 2,
                    parts.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Serialization(format!("bad number {s:?}: {e}")))
            };
            rows.push(IterationRow {
                iteration: parts[0]
                    .parse()
                    .map_err(|e| Error::Serialization(format!("bad iteration: {e}")))?,
                return_true: parse(parts[1])?,
                cost_true: parse(parts[2])?,
                cost_learned: parse(parts[3])?,
                lambda: parse(parts[4])?,
                delta: parse(parts[5])?,
                violation_rate_true: parse(parts[6])?,
                violation_rate_pred: parse(parts[7])?,
                entropy: parse(parts[8])?,
            });
        }
        Ok(rows)
    }

    pub fn read_summary_json(path: &Path) -> Result<RunSummary> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
