//! Cost inference from preferences: the composite loss and its gradient.
//!
//! The learned per-step cost ĉ(s, a) aggregates to a trajectory cost
//! `C(tau) = sum_t gamma^t c(s_t, a_t)` whose sign judges safety (threshold
//! fixed at 0). Three loss terms shape it:
//!
//! - pairwise cross-entropy on preferences, `P(a > b) = sigmoid(C_b - C_a)`;
//! - dead-zone safety: safe trajectories are pushed below 0, unsafe ones
//!   above `delta >= 0`, carving an empty margin `[0, delta]`;
//! - an SNR term rewarding batch-cost variance, normalized by the entropy of
//!   the preference labels.
//!
//! All log arguments are clamped at 1e-12 and the entropy denominator at
//! 1e-3. Gradients are exact reverse-mode and are validated against central
//! finite differences in the test suite.

mod train;

pub use train::{
    finetune_online, pairwise_accuracy, pretrain_offline, write_training_curve, CostTrainConfig,
    EpochStats, PretrainOutcome,
};

use std::path::Path;

use serde_json::json;

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, ForwardTrace, Gradients, Network};
use crate::pref::PreferenceRecord;
use crate::stats::{ln_clamped, mean, sigmoid};

const LOG_FLOOR: f64 = 1e-12;
const ENTROPY_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CostModel {
    pub net: Network,
    delta: f64,
    gamma: f64,
}

impl CostModel {
    pub fn new(net: Network, delta: f64, gamma: f64) -> Result<Self> {
        if net.out_dim() != 1 {
            return Err(Error::Shape(format!(
                "cost model head must be scalar, got {}",
                net.out_dim()
            )));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dead zone must be >= 0, got {delta}"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in (0, 1], got {gamma}"
            )));
        }
        Ok(CostModel { net, delta, gamma })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dead zone must be >= 0, got {delta}"
            )));
        }
        self.delta = delta;
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// ĉ(s, a) for one step, from concatenated observation and action
    /// features.
    pub fn step_cost(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let mut input = Vec::with_capacity(obs.len() + action.len());
        input.extend_from_slice(obs);
        input.extend_from_slice(action);
        Ok(self.net.forward(&input)?[0])
    }

    /// Discounted learned trajectory cost `sum_t gamma^t c(s_t, a_t)`.
    pub fn traj_cost_estimate(&self, traj: &Trajectory) -> Result<f64> {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for s in &traj.steps {
            acc += disc * self.step_cost(&s.obs, &s.action)?;
            disc *= self.gamma;
        }
        Ok(acc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            &self.net,
            path,
            &json!({"kind": "cost-model", "delta": self.delta, "gamma": self.gamma}),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = load_checkpoint(path)?;
        let delta = meta
            .get("delta")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint("sidecar missing delta".into()))?;
        let gamma = meta
            .get("gamma")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint("sidecar missing gamma".into()))?;
        CostModel::new(net, delta, gamma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PbciLossBreakdown {
    pub pair_loss: f64,
    pub safe_dz_loss: f64,
    pub snr_loss: f64,
    pub total: f64,
}

/// `P(tau_1 preferred over tau_2) = sigmoid(C_2 - C_1)`: lower estimated cost
/// wins.
pub fn pref_prob(c_hat_1: f64, c_hat_2: f64) -> f64 {
    sigmoid(c_hat_2 - c_hat_1)
}

/// Per-trajectory features and discount weights, precomputed once per batch.
pub(crate) struct PreparedTraj {
    pub feats: Vec<Vec<f64>>,
    pub disc: Vec<f64>,
}

pub(crate) struct PreparedBatch {
    /// Layout: `[a_0, b_0, a_1, b_1, ...]`.
    pub trajs: Vec<PreparedTraj>,
    pub mu: Vec<(f64, f64)>,
    pub eps: Vec<u8>,
}

pub(crate) fn prepare_batch(
    records: &[PreferenceRecord],
    in_dim: usize,
    gamma: f64,
) -> Result<PreparedBatch> {
    let mut trajs = Vec::with_capacity(records.len() * 2);
    let mut mu = Vec::with_capacity(records.len());
    let mut eps = Vec::with_capacity(records.len() * 2);
    for r in records {
        r.validate()?;
        for t in [&r.traj_a, &r.traj_b] {
            let mut feats = Vec::with_capacity(t.len());
            let mut disc = Vec::with_capacity(t.len());
            let mut d = 1.0;
            for s in &t.steps {
                if s.obs.len() + s.action.len() != in_dim {
                    return Err(Error::Shape(format!(
                        "step features have width {}, cost model expects {in_dim}",
                        s.obs.len() + s.action.len()
                    )));
                }
                let mut f = Vec::with_capacity(in_dim);
                f.extend_from_slice(&s.obs);
                f.extend_from_slice(&s.action);
                feats.push(f);
                disc.push(d);
                d *= gamma;
            }
            trajs.push(PreparedTraj { feats, disc });
        }
        mu.push((r.mu_a, r.mu_b));
        eps.push(r.eps_a);
        eps.push(r.eps_b);
    }
    Ok(PreparedBatch { trajs, mu, eps })
}

pub(crate) fn traj_costs(net: &Network, batch: &PreparedBatch) -> Result<Vec<f64>> {
    batch
        .trajs
        .iter()
        .map(|t| {
            let mut acc = 0.0;
            for (f, d) in t.feats.iter().zip(&t.disc) {
                acc += d * net.forward(f)?[0];
            }
            Ok(acc)
        })
        .collect()
}

/// Pairwise term value and, when `grad` is set, d(term)/dC per trajectory
/// added into `upstream`.
fn pair_term(costs: &[f64], mu: &[(f64, f64)], upstream: Option<&mut [f64]>) -> f64 {
    let n = mu.len() as f64;
    let mut total = 0.0;
    let mut up = upstream;
    for (r, &(mu_a, mu_b)) in mu.iter().enumerate() {
        let ca = costs[2 * r];
        let cb = costs[2 * r + 1];
        let p = pref_prob(ca, cb);
        total += -(mu_a * ln_clamped(p, LOG_FLOOR) + mu_b * ln_clamped(1.0 - p, LOG_FLOOR));
        if let Some(u) = up.as_deref_mut() {
            // d/dx of -[mu_a ln max(P,f) + mu_b ln max(1-P,f)] with
            // x = cb - ca and P = sigmoid(x); clamped branches contribute 0.
            let mut dx = 0.0;
            if p > LOG_FLOOR {
                dx -= mu_a * (1.0 - p);
            }
            if 1.0 - p > LOG_FLOOR {
                dx += mu_b * p;
            }
            u[2 * r + 1] += dx / n;
            u[2 * r] -= dx / n;
        }
    }
    total / n
}

/// Dead-zone safety term over trajectories (mean over 2N), with optional
/// gradient accumulation.
fn safe_dz_term(costs: &[f64], eps: &[u8], delta: f64, upstream: Option<&mut [f64]>) -> f64 {
    let n = costs.len() as f64;
    let mut total = 0.0;
    let mut up = upstream;
    for (i, (&c, &e)) in costs.iter().zip(eps).enumerate() {
        let (val, dc) = if e == 1 {
            let s = sigmoid(-c);
            let v = -ln_clamped(s, LOG_FLOOR);
            let d = if s > LOG_FLOOR { sigmoid(c) } else { 0.0 };
            (v, d)
        } else {
            let s = sigmoid(c - delta);
            let v = -ln_clamped(s, LOG_FLOOR);
            let d = if s > LOG_FLOOR { -sigmoid(delta - c) } else { 0.0 };
            (v, d)
        };
        total += val;
        if let Some(u) = up.as_deref_mut() {
            u[i] += dc / n;
        }
    }
    total / n
}

/// Plain binary-safety term (no dead zone), kept as an independent code path
/// so the delta = 0 reduction can be checked bitwise against it.
fn safe_plain_term(costs: &[f64], eps: &[u8]) -> f64 {
    let n = costs.len() as f64;
    let mut total = 0.0;
    for (&c, &e) in costs.iter().zip(eps) {
        total += if e == 1 {
            -ln_clamped(sigmoid(-c), LOG_FLOOR)
        } else {
            -ln_clamped(sigmoid(c), LOG_FLOOR)
        };
    }
    total / n
}

/// Entropy (natural log) of the empirical distribution of mu values over the
/// categories {0, 0.5, 1}; both labels of each record count.
fn mu_entropy(mu: &[(f64, f64)]) -> f64 {
    let mut counts = [0usize; 3];
    for &(a, b) in mu {
        for v in [a, b] {
            if v == 0.0 {
                counts[0] += 1;
            } else if v == 0.5 {
                counts[1] += 1;
            } else {
                counts[2] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut h = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// SNR term `-zeta * Var(C) / max(H, 1e-3)` with unbiased variance, plus
/// optional gradient accumulation.
fn snr_term(costs: &[f64], mu: &[(f64, f64)], zeta: f64, upstream: Option<&mut [f64]>) -> f64 {
    let n = costs.len();
    let h = mu_entropy(mu).max(ENTROPY_FLOOR);
    let m = mean(costs);
    let var = costs.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (n as f64 - 1.0);
    if let Some(u) = upstream {
        let scale = -zeta / h * 2.0 / (n as f64 - 1.0);
        for (i, &c) in costs.iter().enumerate() {
            u[i] += scale * (c - m);
        }
    }
    -zeta * var / h
}

fn check_nonempty(records: &[PreferenceRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    Ok(())
}

/// `-E[mu_a log P(a>b) + mu_b log P(b>a)]` over the batch.
pub fn loss_pair(model: &CostModel, batch: &[PreferenceRecord]) -> Result<f64> {
    check_nonempty(batch)?;
    let prepared = prepare_batch(batch, model.net.in_dim(), model.gamma)?;
    let costs = traj_costs(&model.net, &prepared)?;
    Ok(pair_term(&costs, &prepared.mu, None))
}

/// `-E[eps log sigmoid(-C) + (1-eps) log sigmoid(C - delta)]` over all 2N
/// trajectories in the batch.
pub fn loss_safe_dz(model: &CostModel, batch: &[PreferenceRecord], delta: f64) -> Result<f64> {
    check_nonempty(batch)?;
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dead zone must be >= 0, got {delta}"
        )));
    }
    let prepared = prepare_batch(batch, model.net.in_dim(), model.gamma)?;
    let costs = traj_costs(&model.net, &prepared)?;
    Ok(safe_dz_term(&costs, &prepared.eps, delta, None))
}

/// The no-dead-zone safety loss, implemented independently of
/// [`loss_safe_dz`].
pub fn loss_safe_plain(model: &CostModel, batch: &[PreferenceRecord]) -> Result<f64> {
    check_nonempty(batch)?;
    let prepared = prepare_batch(batch, model.net.in_dim(), model.gamma)?;
    let costs = traj_costs(&model.net, &prepared)?;
    Ok(safe_plain_term(&costs, &prepared.eps))
}

/// `-zeta * Var(C) / H(p(mu))`, variance over per-trajectory costs of the
/// batch.
pub fn loss_snr(model: &CostModel, batch: &[PreferenceRecord], zeta: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "SNR term needs at least 2 records, got {}",
            batch.len()
        )));
    }
    if !(zeta >= 0.0) {
        return Err(Error::InvalidArgument(format!("zeta must be >= 0, got {zeta}")));
    }
    let prepared = prepare_batch(batch, model.net.in_dim(), model.gamma)?;
    let costs = traj_costs(&model.net, &prepared)?;
    Ok(snr_term(&costs, &prepared.mu, zeta, None))
}

/// Composite loss. `zeta = 0` skips the SNR term (and its batch-size
/// requirement); `delta = 0, zeta = 0` is the plain preference-BT baseline.
pub fn loss_pbci(
    model: &CostModel,
    batch: &[PreferenceRecord],
    delta: f64,
    zeta: f64,
) -> Result<PbciLossBreakdown> {
    let (breakdown, _) = pbci_eval(model, batch, delta, zeta, false)?;
    Ok(breakdown)
}

/// Composite loss plus exact gradient w.r.t. the network parameters.
pub fn loss_pbci_grad(
    model: &CostModel,
    batch: &[PreferenceRecord],
    delta: f64,
    zeta: f64,
) -> Result<(PbciLossBreakdown, Gradients)> {
    let (breakdown, grads) = pbci_eval(model, batch, delta, zeta, true)?;
    Ok((breakdown, grads.expect("gradient requested")))
}

fn pbci_eval(
    model: &CostModel,
    batch: &[PreferenceRecord],
    delta: f64,
    zeta: f64,
    want_grad: bool,
) -> Result<(PbciLossBreakdown, Option<Gradients>)> {
    check_nonempty(batch)?;
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dead zone must be >= 0, got {delta}"
        )));
    }
    if !(zeta >= 0.0) {
        return Err(Error::InvalidArgument(format!("zeta must be >= 0, got {zeta}")));
    }
    if zeta > 0.0 && batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "SNR term needs at least 2 records".into(),
        ));
    }
    let prepared = prepare_batch(batch, model.net.in_dim(), model.gamma)?;
    pbci_eval_prepared(&model.net, &prepared, delta, zeta, want_grad)
}

/// Shared core for public ops and the training loop: loss terms from
/// per-trajectory costs, then one backward pass per step with the summed
/// upstream `dL/dC_i * gamma^t`.
pub(crate) fn pbci_eval_prepared(
    net: &Network,
    prepared: &PreparedBatch,
    delta: f64,
    zeta: f64,
    want_grad: bool,
) -> Result<(PbciLossBreakdown, Option<Gradients>)> {
    let n_trajs = prepared.trajs.len();

    // Forward passes: keep traces only when the gradient is needed.
    let mut costs = vec![0.0; n_trajs];
    let mut traces: Vec<Vec<ForwardTrace>> = Vec::new();
    if want_grad {
        traces.reserve(n_trajs);
    }
    for (i, t) in prepared.trajs.iter().enumerate() {
        let mut acc = 0.0;
        let mut step_traces = Vec::new();
        if want_grad {
            step_traces.reserve(t.feats.len());
        }
        for (f, d) in t.feats.iter().zip(&t.disc) {
            if want_grad {
                let tr = net.forward_trace(f)?;
                acc += d * tr.output()[0];
                step_traces.push(tr);
            } else {
                acc += d * net.forward(f)?[0];
            }
        }
        costs[i] = acc;
        if want_grad {
            traces.push(step_traces);
        }
    }

    let mut upstream = if want_grad { Some(vec![0.0; n_trajs]) } else { None };

    let pair_loss = pair_term(&costs, &prepared.mu, upstream.as_deref_mut());
    let safe_dz_loss = safe_dz_term(&costs, &prepared.eps, delta, upstream.as_deref_mut());
    let snr_loss = if zeta > 0.0 {
        snr_term(&costs, &prepared.mu, zeta, upstream.as_deref_mut())
    } else {
        0.0
    };
    let total = pair_loss + safe_dz_loss + snr_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "composite loss (pair {pair_loss}, safe {safe_dz_loss}, snr {snr_loss})"
        )));
    }
    let breakdown = PbciLossBreakdown {
        pair_loss,
        safe_dz_loss,
        snr_loss,
        total,
    };

    let grads = if let Some(up) = upstream {
        let mut g = Gradients::zeros_like(net);
        for (i, t) in prepared.trajs.iter().enumerate() {
            if up[i] == 0.0 {
                continue;
            }
            for (tr, d) in traces[i].iter().zip(&t.disc) {
                net.backward_into(tr, &[up[i] * d], &mut g)?;
            }
        }
        g.check_finite()?;
        Some(g)
    } else {
        None
    };
    Ok((breakdown, grads))
}

/// Fraction of trajectories the model flags as violating: `C(tau) > 0`,
/// strictly.
pub fn predicted_violation_rate(model: &CostModel, batch: &[Trajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory batch".into()));
    }
    let mut count = 0usize;
    for t in batch {
        if model.traj_cost_estimate(t)? > 0.0 {
            count += 1;
        }
    }
    Ok(count as f64 / batch.len() as f64)
}

/// Fraction of labeled trajectories with eps = 0.
pub fn empirical_violation_rate(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label batch".into()));
    }
    Ok(labels.iter().filter(|&&e| e == 0).count() as f64 / labels.len() as f64)
}

/// Signed-error surrogate for the dead-zone calibration: grows delta when
/// violations are under-predicted, shrinks it otherwise, clamped at 0. The
/// indicator-based objective has no usable gradient in delta, so the update
/// follows the direction the dead zone provably moves unsafe costs.
pub fn deadzone_step(delta: f64, p_vio: f64, p_vio_hat: f64, lr_delta: f64) -> f64 {
    (delta + lr_delta * (p_vio - p_vio_hat)).max(0.0)
}

/// Applies [`deadzone_step`] using the model's current dead zone, predicted
/// violations on the batch trajectories, and empirical violations from the
/// labels.
pub fn calibrate_deadzone(
    model: &CostModel,
    labeled: &[(Trajectory, u8)],
    lr_delta: f64,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("empty calibration batch".into()));
    }
    if !(lr_delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lr_delta must be positive, got {lr_delta}"
        )));
    }
    let trajs: Vec<Trajectory> = labeled.iter().map(|(t, _)| t.clone()).collect();
    let labels: Vec<u8> = labeled.iter().map(|&(_, e)| e).collect();
    let p_hat = predicted_violation_rate(model, &trajs)?;
    let p = empirical_violation_rate(&labels)?;
    Ok(deadzone_step(model.delta(), p, p_hat, lr_delta))
}
