//! `pbcrl`: reproducible experiment entry point.
//!
//! Subcommands:
//! - `pretrain` — build the offline preference dataset and pretrain the cost
//!   model for every configured seed; emits the dataset, a cost-model
//!   checkpoint, and the training-curve CSV per seed.
//! - `run` — execute the full two-stage training loop per seed; emits a
//!   per-iteration CSV and summary JSON per seed plus one aggregate JSON.
//! - `verify-theory` — run the four analytic checks; any failed claim makes
//!   the process exit with code 3.
//! - `analyze` — aggregate existing run reports into an ablation table.
//!
//! Every run directory receives the fully-resolved config (defaults
//! expanded) and its content hash, so any artifact can be reproduced from
//! the directory alone. Exit codes: 0 success, 1 validation error, 2 runtime
//! error, 3 failed theory check. Failures print a single-line JSON object
//! (`{"error":{"kind","message","exit_code"}}`) to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbcrl_core::config::{
    parse_config, parse_config_str, AblationMode, EnvChoice, ExperimentConfig,
};
use pbcrl_core::constraint::write_training_curve;
use pbcrl_core::metrics::assemble_ablation_report;
use pbcrl_core::policy::{pretrain_stage, run_pbcrl, PretrainArtifacts};
use pbcrl_core::pref::save_dataset;
use pbcrl_core::report::ExperimentReport;
use pbcrl_core::theory::default_verification_suite;
use pbcrl_core::{Error, Result};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_THEORY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "pbcrl",
    version,
    about = "Desk-scale laboratory for preference-based constrained RL"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the offline preference dataset and pretrain the cost model.
    Pretrain(ExperimentArgs),
    /// Run the full two-stage training loop for every configured seed.
    Run(ExperimentArgs),
    /// Execute the analytic checks; exits 3 if any claim fails.
    VerifyTheory(VerifyArgs),
    /// Aggregate existing run reports into an ablation table.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; every field is optional and defaulted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config and PBCRL_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ablation mode override: full, plain-bt, or offline-only.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// TOML experiment config; only its first seed is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the sampled portions of the checks.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the verdicts JSON (stdout gets one line per check).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directories or summary.json files; directories are searched
    /// recursively, and report order follows the argument order.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Directory for ablation.csv and ablation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprint!("{err}");
            return fail_json("usage", &err.to_string(), EXIT_VALIDATION);
        }
    };
    let result = match cli.command {
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::VerifyTheory(args) => cmd_verify_theory(args),
        Cmd::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => fail_json(error_kind(&err), &err.to_string(), exit_code_for(&err)),
    }
}

/// Emit the machine-readable error line and return the matching exit code.
fn fail_json(kind: &str, message: &str, code: u8) -> ExitCode {
    let payload = serde_json::json!({
        "error": { "kind": kind, "message": message, "exit_code": code }
    });
    eprintln!("{payload}");
    ExitCode::from(code)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidArgument(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Shape(_) => "shape",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::NonFinite(_) => "non-finite",
        Error::BudgetExhausted { .. } => "budget-exhausted",
        Error::DegenerateData(_) => "degenerate-data",
        Error::InvalidConfig(_) => "invalid-config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
        Error::Serialization(_) => "serialization",
    }
}

/// Read and validate a config file; unreadable or unparsable files are the
/// caller's fault and map to the validation exit code.
fn read_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("config {}: {io}", path.display())),
        Error::Serialization(msg) => {
            Error::InvalidConfig(vec![format!("config {}: {msg}", path.display())])
        }
        other => other,
    })
}

/// Load the config (defaults when no file is given; PBCRL_OUT / PBCRL_SEED
/// apply either way), then apply command-line overrides and revalidate.
fn load_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => read_config(path)?,
        None => parse_config_str("")?,
    };
    if let Some(seed) = args.seed {
        config.run.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        config.run.out_dir = out.display().to_string();
    }
    if let Some(mode) = &args.ablation {
        config.ablation.mode = parse_ablation(mode)?;
    }
    config.validate()?;
    Ok(config)
}

fn parse_ablation(text: &str) -> Result<AblationMode> {
    match text {
        "full" => Ok(AblationMode::Full),
        "plain-bt" => Ok(AblationMode::PlainBt),
        "offline-only" => Ok(AblationMode::OfflineOnly),
        other => Err(Error::InvalidConfig(vec![format!(
            "ablation: unknown mode {other:?} (expected full, plain-bt, or offline-only)"
        )])),
    }
}

/// `<out_dir>/<label>/` with the resolved config and its hash inside.
fn prepare_run_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = Path::new(&config.run.out_dir).join(config.label());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.resolved_dump()?)?;
    std::fs::write(
        dir.join("config.sha256"),
        format!("{}\n", config.content_hash()?),
    )?;
    Ok(dir)
}

fn seed_dir(run_dir: &Path, seed: u64) -> Result<PathBuf> {
    let dir = run_dir.join(format!("seed-{seed:04}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_pretrain(args: ExperimentArgs) -> Result<ExitCode> {
    let config = load_config(&args)?;
    let env = config.env.build()?;
    let run_dir = prepare_run_dir(&config)?;
    let env_hash = config.content_hash()?;
    for &seed in &config.run.seeds {
        let artifacts = match &env {
            EnvChoice::Chain(e) => pretrain_stage(e, &config, seed)?,
            EnvChoice::Point(e) => pretrain_stage(e, &config, seed)?,
        };
        let dir = seed_dir(&run_dir, seed)?;
        write_pretrain_artifacts(&dir, &artifacts, seed, &env_hash)?;
        println!(
            "seed {seed}: holdout accuracy {:.4} after {} epochs (delta {:.3}, {} records)",
            artifacts.holdout_accuracy,
            artifacts.epochs_run,
            artifacts.model.delta(),
            artifacts.dataset.len(),
        );
    }
    println!("wrote {}", run_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn write_pretrain_artifacts(
    dir: &Path,
    artifacts: &PretrainArtifacts,
    seed: u64,
    env_hash: &str,
) -> Result<()> {
    artifacts.model.save(&dir.join("cost_model.bin"))?;
    write_training_curve(&dir.join("training_curve.csv"), &artifacts.curve)?;
    save_dataset(&dir.join("dataset"), &artifacts.dataset, seed, env_hash)?;
    Ok(())
}

fn cmd_run(args: ExperimentArgs) -> Result<ExitCode> {
    let config = load_config(&args)?;
    let env = config.env.build()?;
    let run_dir = prepare_run_dir(&config)?;
    let mut reports = Vec::with_capacity(config.run.seeds.len());
    for &seed in &config.run.seeds {
        let dir = seed_dir(&run_dir, seed)?;
        let report = match &env {
            EnvChoice::Chain(e) => run_pbcrl(e, &config, seed, Some(&dir))?,
            EnvChoice::Point(e) => run_pbcrl(e, &config, seed, Some(&dir))?,
        };
        report.write_csv(&dir.join("report.csv"))?;
        report.write_summary_json(&dir.join("summary.json"))?;
        println!(
            "seed {seed}: final return {:.3}, final cost {:.3} (threshold bias {:+.3}), \
             lambda {:.4}, delta {:.3}, W2 {:.4}",
            report.summary.return_final,
            report.summary.cost_final,
            report.summary.bias_final,
            report.summary.lambda_final,
            report.summary.delta_final,
            report.summary.w2_normalized,
        );
        reports.push(report);
    }
    let table = assemble_ablation_report(&reports)?;
    table.write_json(&run_dir.join("aggregate.json"))?;
    println!("wrote {}", run_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_theory(args: VerifyArgs) -> Result<ExitCode> {
    let config = match &args.config {
        Some(path) => read_config(path)?,
        None => parse_config_str("")?,
    };
    let seed = args.seed.unwrap_or(config.run.seeds[0]);
    let verdicts = default_verification_suite(seed)?;
    let mut all_pass = true;
    for v in &verdicts {
        println!(
            "{}: {} ({} checked, {} violations, min margin {:.3e})",
            v.claim,
            if v.pass { "PASS" } else { "FAIL" },
            v.checked,
            v.violations,
            v.min_margin,
        );
        for example in &v.counterexamples {
            println!("  counterexample: {example}");
        }
        all_pass &= v.pass;
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(
            out.join("verdicts.json"),
            serde_json::to_string_pretty(&verdicts)?,
        )?;
    }
    if all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<&str> = verdicts
            .iter()
            .filter(|v| !v.pass)
            .map(|v| v.claim.as_str())
            .collect();
        Ok(fail_json(
            "theory-check-failed",
            &format!("failed checks: {}", failed.join(", ")),
            EXIT_THEORY,
        ))
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let mut reports = Vec::new();
    for path in &args.paths {
        collect_reports(path, &mut reports)?;
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(
            "no summary.json found under the given paths".into(),
        ));
    }
    let table = assemble_ablation_report(&reports)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    if let Some(out) = &args.out {
        table.write_csv(&out.join("ablation.csv"))?;
        table.write_json(&out.join("ablation.json"))?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Gather reports from a summary.json file or, recursively and in sorted
/// order, from every summary.json below a directory. Each summary's sibling
/// report.csv supplies the per-iteration rows.
fn collect_reports(path: &Path, out: &mut Vec<ExperimentReport>) -> Result<()> {
    if path.is_file() {
        if path.file_name().and_then(|n| n.to_str()) != Some("summary.json") {
            return Err(Error::InvalidArgument(format!(
                "{} is not a summary.json file",
                path.display()
            )));
        }
        let summary = ExperimentReport::read_summary_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let rows = ExperimentReport::read_csv(&dir.join("report.csv"))?;
        out.push(ExperimentReport { rows, summary });
        return Ok(());
    }
    if !path.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            collect_reports(&entry, out)?;
        } else if entry.file_name().and_then(|n| n.to_str()) == Some("summary.json") {
            collect_reports(&entry, out)?;
        }
    }
    Ok(())
}
