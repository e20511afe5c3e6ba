//! Distribution-alignment metrics and ablation aggregation.
//!
//! The headline metric is the 1-D 2-Wasserstein distance between a
//! ground-truth episode-cost sample and the learned-cost sample, evaluated on
//! a common grid of 1024 empirical quantiles. Both raw and z-score-normalized
//! variants are reported since the reference tables' scale convention is
//! ambiguous.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{final_window_mean, mid_window_mean, ExperimentReport};
use crate::stats::{all_finite, mean, std_dev};

pub const W2_QUANTILES: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
    pub label: String,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty sample set".into()));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("sample set".into()));
        }
        Ok(SampleSet {
            values,
            label: label.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// Z-score-normalized copy; a constant sample maps to all zeros.
    pub fn normalized(&self) -> SampleSet {
        let m = self.mean();
        let s = std_dev(&self.values);
        let vals = if s > 1e-12 {
            self.values.iter().map(|v| (v - m) / s).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        SampleSet {
            values: vals,
            label: format!("{} (normalized)", self.label),
        }
    }

    /// Single-column CSV export for external plotting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = String::from("value\n");
        for v in &self.values {
            out.push_str(&format!("{v}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Empirical quantile function evaluated at the midpoint grid
    /// `q_k = (k + 0.5) / n`: `Q(q) = x_(ceil(q m) - 1)` over the sorted
    /// sample. Step quantiles (not linear interpolation) so that equal-size
    /// inputs reduce to the exact sorted-sample W2.
    fn quantile_grid(&self, n: usize) -> Vec<f64> {
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let m = sorted.len() as f64;
        (0..n)
            .map(|k| {
                let q = (k as f64 + 0.5) / n as f64;
                let idx = (q * m).ceil() as usize;
                sorted[idx.clamp(1, sorted.len()) - 1]
            })
            .collect()
    }
}

/// 1-D 2-Wasserstein distance: RMS difference of the two empirical quantile
/// functions on a common 1024-point grid.
pub fn w2_distance(a: &SampleSet, b: &SampleSet) -> f64 {
    let qa = a.quantile_grid(W2_QUANTILES);
    let qb = b.quantile_grid(W2_QUANTILES);
    let ms = qa
        .iter()
        .zip(&qb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / W2_QUANTILES as f64;
    ms.sqrt()
}

/// |mean converged cost - threshold|.
pub fn bias_to_threshold(mean_converged_cost: f64, d: f64) -> f64 {
    (mean_converged_cost - d).abs()
}

/// Fraction of samples at or above `z`.
pub fn tail_probability(a: &SampleSet, z: f64) -> f64 {
    a.values.iter().filter(|&&v| v >= z).count() as f64 / a.values.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub n_runs: usize,
    pub return_mid_mean: f64,
    pub return_mid_std: f64,
    pub cost_mid_mean: f64,
    pub cost_mid_std: f64,
    pub return_final_mean: f64,
    pub return_final_std: f64,
    pub cost_final_mean: f64,
    pub cost_final_std: f64,
    pub w2_raw_mean: f64,
    pub w2_normalized_mean: f64,
    pub bias_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub env: String,
    pub rows: Vec<AblationRow>,
}

/// Fraction of iterations averaged by the "mid" and "final" summary windows.
pub const WINDOW_FRAC: f64 = 0.1;

/// Groups runs by summary label and aggregates mean +/- std of the windowed
/// return/cost statistics plus the alignment metrics. All runs must come
/// from the same environment.
pub fn assemble_ablation_report(runs: &[ExperimentReport]) -> Result<AblationTable> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to aggregate".into()));
    }
    let env = runs[0].summary.env.clone();
    if runs.iter().any(|r| r.summary.env != env) {
        return Err(Error::InvalidArgument(format!(
            "runs mix environments: {:?}",
            runs.iter()
                .map(|r| r.summary.env.as_str())
                .collect::<std::collections::BTreeSet<_>>()
        )));
    }
    let mut labels: Vec<String> = Vec::new();
    for r in runs {
        if !labels.contains(&r.summary.label) {
            labels.push(r.summary.label.clone());
        }
    }
    let rows = labels
        .iter()
        .map(|label| {
            let group: Vec<&ExperimentReport> =
                runs.iter().filter(|r| &r.summary.label == label).collect();
            let collect = |f: &dyn Fn(&ExperimentReport) -> f64| -> Vec<f64> {
                group.iter().map(|r| f(r)).collect()
            };
            let ret_mid = collect(&|r| mid_window_mean(&r.rows, WINDOW_FRAC, |x| x.return_true));
            let cost_mid = collect(&|r| mid_window_mean(&r.rows, WINDOW_FRAC, |x| x.cost_true));
            let ret_fin = collect(&|r| final_window_mean(&r.rows, WINDOW_FRAC, |x| x.return_true));
            let cost_fin = collect(&|r| final_window_mean(&r.rows, WINDOW_FRAC, |x| x.cost_true));
            let w2_raw = collect(&|r| r.summary.w2_raw);
            let w2_norm = collect(&|r| r.summary.w2_normalized);
            let bias = collect(&|r| r.summary.bias_final);
            AblationRow {
                label: label.clone(),
                n_runs: group.len(),
                return_mid_mean: mean(&ret_mid),
                return_mid_std: std_dev(&ret_mid),
                cost_mid_mean: mean(&cost_mid),
                cost_mid_std: std_dev(&cost_mid),
                return_final_mean: mean(&ret_fin),
                return_final_std: std_dev(&ret_fin),
                cost_final_mean: mean(&cost_fin),
                cost_final_std: std_dev(&cost_fin),
                w2_raw_mean: mean(&w2_raw),
                w2_normalized_mean: mean(&w2_norm),
                bias_mean: mean(&bias),
            }
        })
        .collect();
    Ok(AblationTable { env, rows })
}

impl AblationTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = String::from(
            "label,n_runs,return_mid_mean,return_mid_std,cost_mid_mean,cost_mid_std,\
             return_final_mean,return_final_std,cost_final_mean,cost_final_std,\
             w2_raw_mean,w2_normalized_mean,bias_mean\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.n_runs,
                r.return_mid_mean,
                r.return_mid_std,
                r.cost_mid_mean,
                r.cost_mid_std,
                r.return_final_mean,
                r.return_final_std,
                r.cost_final_mean,
                r.cost_final_std,
                r.w2_raw_mean,
                r.w2_normalized_mean,
                r.bias_mean
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
