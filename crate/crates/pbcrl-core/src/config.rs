//! Experiment configuration: TOML schema, defaults, validation, and the
//! resolved dump that makes every run reproducible from its artifacts.
//!
//! Every section has complete defaults, so an empty file is a valid config.
//! Unknown keys are rejected, validation reports all violations at once with
//! field paths, and the only environment overrides are `PBCRL_OUT` (output
//! directory) and `PBCRL_SEED` (replaces the seed list with one seed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraint::CostTrainConfig;
use crate::env::{ChainConfig, ChainHazard, PointConfig, PointHazard};
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::util::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Chain,
    Point,
}

/// Environment selection plus parameters for both benchmark environments;
/// only the selected one is instantiated.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub chain: ChainConfig,
    pub point: PointConfig,
}

impl Default for EnvKind {
    fn default() -> Self {
        EnvKind::Chain
    }
}

/// Either benchmark environment, constructed from the config.
#[derive(Clone, Debug)]
pub enum EnvChoice {
    Chain(ChainHazard),
    Point(PointHazard),
}

impl EnvSection {
    pub fn build(&self) -> Result<EnvChoice> {
        match self.kind {
            EnvKind::Chain => Ok(EnvChoice::Chain(ChainHazard::new(self.chain.clone())?)),
            EnvKind::Point => Ok(EnvChoice::Point(PointHazard::new(self.point.clone())?)),
        }
    }
}

/// Preference-query budget and its offline/online split.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub total: usize,
    pub offline: usize,
    pub online: usize,
    /// Pairs labeled per online finetuning event.
    pub online_pairs_per_event: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            total: 2000,
            offline: 1800,
            online: 200,
            online_pairs_per_event: 20,
        }
    }
}

impl BudgetSection {
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.offline + self.online != self.total {
            out.push(format!(
                "budget.total: offline {} + online {} must sum to the budget, got {}",
                self.offline, self.online, self.total
            ));
        }
        if self.offline < 2 {
            out.push(format!(
                "budget.offline: need at least 2 offline queries, got {}",
                self.offline
            ));
        }
        if self.online_pairs_per_event == 0 {
            out.push("budget.online_pairs_per_event: must be at least 1".into());
        }
        out
    }
}

/// Cost-model architecture and training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelSection {
    /// Initial dead-zone width; calibrated online unless ablated away.
    pub delta_init: f64,
    /// Hidden layer widths of the cost network.
    pub hidden: Vec<usize>,
    /// Cost-model step size (the fastest timescale).
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_frac: f64,
    /// Variance-regularizer weight ζ.
    pub zeta: f64,
    pub finetune_epochs: usize,
}

impl Default for CostModelSection {
    fn default() -> Self {
        let t = CostTrainConfig::default();
        CostModelSection {
            delta_init: 1.0,
            hidden: vec![32],
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            holdout_frac: t.holdout_frac,
            zeta: t.zeta,
            finetune_epochs: t.finetune_epochs,
        }
    }
}

impl CostModelSection {
    /// Runtime training config, seeded per run.
    pub fn train_config(&self, seed: u64) -> CostTrainConfig {
        CostTrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            holdout_frac: self.holdout_frac,
            zeta: self.zeta,
            finetune_epochs: self.finetune_epochs,
            seed,
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.delta_init >= 0.0) {
            out.push(format!(
                "cost_model.delta_init: must be nonnegative, got {}",
                self.delta_init
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            out.push("cost_model.hidden: need at least one nonzero hidden width".into());
        }
        if let Err(Error::InvalidConfig(mut inner)) = self.train_config(0).validate() {
            out.append(&mut inner);
        }
        out
    }
}

/// Which part of the method an experiment runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Dead zone + variance regularizer + online calibration/finetuning.
    #[default]
    Full,
    /// Pairwise loss only: zero dead zone, no regularizer, no calibration.
    PlainBt,
    /// Offline pretraining only: the whole budget is spent up front and the
    /// cost model stays frozen during policy optimization.
    OfflineOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub mode: AblationMode,
    /// Probability of corrupting each oracle label.
    pub noise_rate: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            mode: AblationMode::Full,
            noise_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// One independent run per seed.
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Seed of the fixed behavior-mixture evaluation set, shared across runs
    /// so end-of-run distribution metrics are comparable.
    pub eval_seed: u64,
    /// Report label override; empty means derive it from the ablation mode.
    pub label: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: "runs".into(),
            eval_seed: 777,
            label: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub budget: BudgetSection,
    pub cost_model: CostModelSection,
    pub policy: PolicyConfig,
    pub run: RunSection,
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    /// Validate every invariant, reporting all violations with field paths.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for section in [
            self.env.chain.validate().err(),
            self.env.point.validate().err(),
        ]
        .into_iter()
        .flatten()
        {
            if let Error::InvalidConfig(mut inner) = section {
                problems.append(&mut inner);
            }
        }
        problems.extend(self.budget.problems());
        problems.extend(self.cost_model.problems());
        problems.extend(self.policy.problems());
        if !(self.policy.lr_lambda < self.policy.lr_theta && self.policy.lr_theta < self.cost_model.lr)
        {
            problems.push(format!(
                "policy.lr_lambda/policy.lr_theta/cost_model.lr: timescale ordering requires \
                 lr_lambda < lr_theta < cost-model lr, got {} / {} / {}",
                self.policy.lr_lambda, self.policy.lr_theta, self.cost_model.lr
            ));
        }
        if !(0.0..1.0).contains(&self.ablation.noise_rate) {
            problems.push(format!(
                "ablation.noise_rate: must lie in [0, 1), got {}",
                self.ablation.noise_rate
            ));
        }
        if self.run.seeds.is_empty() {
            problems.push("run.seeds: need at least one seed".into());
        }
        if self.run.out_dir.is_empty() {
            problems.push("run.out_dir: must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Offline/online budget actually used by a run: the offline-only
    /// ablation spends the whole budget up front.
    pub fn effective_budget(&self) -> (usize, usize) {
        match self.ablation.mode {
            AblationMode::OfflineOnly => (self.budget.total, 0),
            _ => (self.budget.offline, self.budget.online),
        }
    }

    /// Dead-zone width and regularizer weight after applying the ablation.
    pub fn effective_delta_zeta(&self) -> (f64, f64) {
        match self.ablation.mode {
            AblationMode::PlainBt => (0.0, 0.0),
            _ => (self.cost_model.delta_init, self.cost_model.zeta),
        }
    }

    /// Short label identifying the configuration in reports and tables.
    pub fn label(&self) -> String {
        if !self.run.label.is_empty() {
            return self.run.label.clone();
        }
        let base = match self.ablation.mode {
            AblationMode::Full => "full".to_string(),
            AblationMode::PlainBt => "plain-bt".to_string(),
            AblationMode::OfflineOnly => "offline-only".to_string(),
        };
        if self.ablation.noise_rate > 0.0 {
            format!("{base}-noise{:.2}", self.ablation.noise_rate)
        } else {
            base
        }
    }

    /// Canonical serialized form with every default expanded.
    pub fn resolved_dump(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Content hash of the resolved dump.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.resolved_dump()?.as_bytes()))
    }
}

/// Parse, apply environment overrides, and validate.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_config_str(&text)
}

/// As [`parse_config`] but from an in-memory string.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = toml::from_str(text)?;
    if let Ok(out) = std::env::var("PBCRL_OUT") {
        if !out.is_empty() {
            config.run.out_dir = out;
        }
    }
    if let Ok(seed) = std::env::var("PBCRL_SEED") {
        if !seed.is_empty() {
            let parsed: u64 = seed.parse().map_err(|_| {
                Error::InvalidArgument(format!("PBCRL_SEED must be an integer, got {seed:?}"))
            })?;
            config.run.seeds = vec![parsed];
        }
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.env.kind, EnvKind::Chain);
        assert_eq!(cfg.budget.total, 2000);
        assert_eq!(cfg.budget.offline, 1800);
        assert_eq!(cfg.policy.iterations, 300);
        assert_eq!(cfg.run.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.ablation.mode, AblationMode::Full);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config_str("[policy]\nlearning_rate = 0.1\n").is_err());
        assert!(parse_config_str("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn timescale_ordering_is_enforced_by_name() {
        let err = parse_config_str("[policy]\nlr_lambda = 0.01\nlr_theta = 0.001\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("timescale"), "message was: {text}");
    }

    #[test]
    fn budget_split_must_sum() {
        let err =
            parse_config_str("[budget]\ntotal = 1000\noffline = 900\nonline = 200\n").unwrap_err();
        assert!(err.to_string().contains("budget.total"));
    }

    #[test]
    fn validation_reports_all_violations_with_paths() {
        let cfg_text = "
[budget]
total = 10
offline = 5
online = 200

[policy]
clip_epsilon = 2.0
rollouts_per_iter = 0

[ablation]
noise_rate = 1.5
";
        let err = parse_config_str(cfg_text).unwrap_err();
        let text = err.to_string();
        for needle in [
            "budget.total",
            "policy.clip_epsilon",
            "policy.rollouts_per_iter",
            "ablation.noise_rate",
        ] {
            assert!(text.contains(needle), "missing {needle} in: {text}");
        }
    }

    #[test]
    fn dump_parse_dump_is_fixed_point() {
        let cfg = ExperimentConfig::default();
        let dump = cfg.resolved_dump().unwrap();
        let reparsed: ExperimentConfig = toml::from_str(&dump).unwrap();
        assert_eq!(dump, reparsed.resolved_dump().unwrap());
        assert_eq!(cfg.content_hash().unwrap(), reparsed.content_hash().unwrap());
    }

    #[test]
    fn single_override_changes_dump_in_one_field() {
        let base = ExperimentConfig::default().resolved_dump().unwrap();
        let tweaked = parse_config_str("[policy]\nclip_epsilon = 0.3\n")
            .unwrap()
            .resolved_dump()
            .unwrap();
        let differing: Vec<(&str, &str)> = base
            .lines()
            .zip(tweaked.lines())
            .filter(|(a, b)| a != b)
            .collect();
        assert_eq!(differing.len(), 1, "diff: {differing:?}");
        assert!(differing[0].1.contains("clip_epsilon = 0.3"));
        assert_eq!(base.lines().count(), tweaked.lines().count());
    }

    #[test]
    fn ablation_effects() {
        let mut cfg = ExperimentConfig::default();
        cfg.ablation.mode = AblationMode::PlainBt;
        assert_eq!(cfg.effective_delta_zeta(), (0.0, 0.0));
        assert_eq!(cfg.effective_budget(), (1800, 200));
        assert_eq!(cfg.label(), "plain-bt");
        cfg.ablation.mode = AblationMode::OfflineOnly;
        assert_eq!(cfg.effective_budget(), (2000, 0));
        cfg.ablation.noise_rate = 0.05;
        assert_eq!(cfg.label(), "offline-only-noise0.05");
        cfg.ablation.mode = AblationMode::Full;
        assert_eq!(
            cfg.effective_delta_zeta(),
            (cfg.cost_model.delta_init, cfg.cost_model.zeta)
        );
    }

    #[test]
    fn env_section_builds_selected_environment() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(cfg.env.build().unwrap(), EnvChoice::Chain(_)));
        let cfg = parse_config_str("[env]\nkind = \"point\"\n").unwrap();
        assert!(matches!(cfg.env.build().unwrap(), EnvChoice::Point(_)));
    }
}
