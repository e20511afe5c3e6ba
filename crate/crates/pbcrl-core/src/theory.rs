//! Executable verification of the dead-zone analysis.
//!
//! Each check evaluates one formal claim behind the dead-zone safety loss on
//! an explicit grid or by exact enumeration, and returns a [`Verdict`] rather
//! than panicking, so the whole suite is usable as a CI gate:
//!
//! * gradient dominance — the dead-zone safety gradient is strictly more
//!   negative than the plain one for every cost estimate when δ > 0;
//! * iterate dominance — under the scalar gradient-descent dynamics the
//!   dead-zone iterate stays strictly above the plain iterate for all t ≥ 1,
//!   and the update map is monotone when the step size is below 4;
//! * tail dominance — a population evolved under the dead-zone dynamics has a
//!   right tail that dominates the plain population's at every threshold;
//! * score covariance bound — on an exhaustively enumerable MDP, the policy
//!   gradient of expected discounted cost equals Cov(C, score) and is bounded
//!   coordinate-wise by Cauchy–Schwarz, with the score exactly zero-mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{softmax_policy, TabularMdp};
use crate::error::{Error, Result};
use crate::stats::sigmoid;
use crate::util::split_seed;

/// Cap on counterexamples stored in a verdict; the total count is always kept.
const MAX_COUNTEREXAMPLES: usize = 16;

/// Outcome of one verification check, serializable for CI consumption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    /// Stable identifier of the claim being checked.
    pub claim: String,
    /// Human-readable description of the evaluated grid or instance.
    pub grid: String,
    pub pass: bool,
    /// Number of individual assertions evaluated.
    pub checked: usize,
    /// Number of failed assertions (may exceed `counterexamples.len()`).
    pub violations: usize,
    /// First few failures, formatted for humans.
    pub counterexamples: Vec<String>,
    /// Smallest observed slack; negative values correspond to violations.
    pub min_margin: f64,
    /// Claim-specific numeric evidence (both sides of inequalities etc.).
    pub detail: Value,
}

impl Verdict {
    fn new(claim: &str, grid: String) -> Self {
        Verdict {
            claim: claim.to_string(),
            grid,
            pass: true,
            checked: 0,
            violations: 0,
            counterexamples: Vec::new(),
            min_margin: f64::INFINITY,
            detail: Value::Null,
        }
    }

    /// Record one assertion with its slack; `margin > 0` means it held
    /// strictly, `margin <= 0` is a violation described by `describe`.
    fn assert_strict(&mut self, margin: f64, describe: impl FnOnce() -> String) {
        self.checked += 1;
        self.min_margin = self.min_margin.min(margin);
        if !(margin > 0.0) {
            self.violations += 1;
            self.pass = false;
            if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
                self.counterexamples.push(describe());
            }
        }
    }

    /// As [`assert_strict`] but tolerating equality.
    fn assert_at_least(&mut self, margin: f64, describe: impl FnOnce() -> String) {
        self.checked += 1;
        self.min_margin = self.min_margin.min(margin);
        if !(margin >= 0.0) {
            self.violations += 1;
            self.pass = false;
            if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
                self.counterexamples.push(describe());
            }
        }
    }

    fn fail(&mut self, reason: String) {
        self.pass = false;
        self.violations += 1;
        if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
            self.counterexamples.push(reason);
        }
    }
}

/// Gradient of the plain safety loss at a cost estimate: −σ(−c).
///
/// Always lies in (−1, 0): the loss keeps pushing estimated costs of
/// constraint-violating trajectories upward, but with vanishing force once
/// the estimate is already large.
pub fn grad_safe(c_hat: f64) -> f64 {
    -sigmoid(-c_hat)
}

/// Gradient of the dead-zone safety loss: −σ(δ − c), requiring δ ≥ 0.
///
/// Shifting the sigmoid by the margin δ keeps the force close to −1 until the
/// estimate clears δ, which is what produces the strictly stronger push.
pub fn grad_safe_dz(c_hat: f64, delta: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dead-zone width must be nonnegative, got {delta}"
        )));
    }
    Ok(-sigmoid(delta - c_hat))
}

/// One-step update map of the plain dynamics: F(c) = c + η(1 − σ(c)).
fn step_plain(c: f64, eta: f64) -> f64 {
    c + eta * (1.0 - sigmoid(c))
}

/// One-step update map of the dead-zone dynamics: F(c) = c + η(1 − σ(c − δ)).
fn step_dead_zone(c: f64, eta: f64, delta: f64) -> f64 {
    c + eta * (1.0 - sigmoid(c - delta))
}

/// Paired iterate sequences of the plain and dead-zone scalar dynamics,
/// started from a shared initial cost estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub c0: f64,
    pub eta: f64,
    pub delta: f64,
    pub steps: usize,
    /// `plain[t]` after t plain updates; length `steps + 1`.
    pub plain: Vec<f64>,
    /// `dead_zone[t]` after t dead-zone updates; length `steps + 1`.
    pub dead_zone: Vec<f64>,
}

/// Iterate both update maps from the shared start for `steps` steps.
pub fn simulate_dynamics(c0: f64, eta: f64, delta: f64, steps: usize) -> DynamicsTrace {
    let mut plain = Vec::with_capacity(steps + 1);
    let mut dead_zone = Vec::with_capacity(steps + 1);
    plain.push(c0);
    dead_zone.push(c0);
    for t in 0..steps {
        plain.push(step_plain(plain[t], eta));
        dead_zone.push(step_dead_zone(dead_zone[t], eta, delta));
    }
    DynamicsTrace {
        c0,
        eta,
        delta,
        steps,
        plain,
        dead_zone,
    }
}

/// Check that the dead-zone safety gradient strictly dominates the plain one:
/// grad_dz(c, δ) < grad(c) < 0 at every grid pair.
///
/// δ = 0 grid points degenerate to equality and are reported as (non-strict)
/// counterexamples, marking the boundary of the claim's hypothesis.
pub fn check_gradient_dominance(c_grid: &[f64], delta_grid: &[f64]) -> Verdict {
    let grid = format!(
        "{} cost points in [{:.3}, {:.3}] x deltas {:?}",
        c_grid.len(),
        c_grid.iter().copied().fold(f64::INFINITY, f64::min),
        c_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        delta_grid
    );
    let mut v = Verdict::new("gradient_dominance", grid);
    let mut min_gap = f64::INFINITY;
    let mut max_gap = f64::NEG_INFINITY;
    for &delta in delta_grid {
        for &c in c_grid {
            let g = grad_safe(c);
            let g_dz = -sigmoid(delta - c);
            let gap = g - g_dz; // positive iff dead-zone gradient is more negative
            min_gap = min_gap.min(gap);
            max_gap = max_gap.max(gap);
            v.assert_strict(gap, || {
                let kind = if gap == 0.0 { "equality" } else { "reversal" };
                format!("c={c}, delta={delta}: grad_dz={g_dz}, grad={g} ({kind})")
            });
            v.assert_strict(-g, || format!("c={c}: plain gradient {g} is not negative"));
        }
    }
    v.detail = json!({ "min_gap": min_gap, "max_gap": max_gap });
    v
}

/// Check strict iterate dominance of the dead-zone dynamics over the plain
/// dynamics for every t in 1..=steps across a grid of starts, step sizes in
/// (0, 4), and dead-zone widths; also checks numerically that the dead-zone
/// update map is order-preserving (the step-size-below-4 condition).
///
/// Monotonicity is probed on `pair_samples` random ordered pairs per (η, δ)
/// plus deterministic pairs straddling the sigmoid's steepest point at c = δ,
/// where a too-large step size breaks order preservation first.
pub fn check_iterate_dominance(
    c0_grid: &[f64],
    eta_grid: &[f64],
    delta_grid: &[f64],
    steps: usize,
    pair_samples: usize,
    seed: u64,
) -> Verdict {
    let grid = format!(
        "c0 {:?} x eta {:?} x delta {:?}, {} steps, {} monotonicity pairs",
        c0_grid, eta_grid, delta_grid, steps, pair_samples
    );
    let mut v = Verdict::new("iterate_dominance", grid);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 17));
    let mut min_dominance_gap = f64::INFINITY;
    let mut min_monotone_gap = f64::INFINITY;
    for &eta in eta_grid {
        for &delta in delta_grid {
            for &c0 in c0_grid {
                let trace = simulate_dynamics(c0, eta, delta, steps);
                for t in 1..=steps {
                    let gap = trace.dead_zone[t] - trace.plain[t];
                    min_dominance_gap = min_dominance_gap.min(gap);
                    v.assert_strict(gap, || {
                        format!(
                            "c0={c0}, eta={eta}, delta={delta}, t={t}: \
                             dead-zone iterate {} <= plain iterate {}",
                            trace.dead_zone[t], trace.plain[t]
                        )
                    });
                }
            }
            // Order preservation of the dead-zone map. Adversarial pairs sit
            // symmetrically around c = delta, where sigmoid'(c - delta) peaks
            // at 1/4 and the map first loses monotonicity as eta reaches 4.
            let mut pairs: Vec<(f64, f64)> = [0.05, 0.1, 0.2, 0.5]
                .iter()
                .map(|h| (delta - h, delta + h))
                .collect();
            for _ in 0..pair_samples {
                let a: f64 = rng.random_range(-12.0..12.0);
                let b: f64 = rng.random_range(-12.0..12.0);
                if a != b {
                    pairs.push((a.min(b), a.max(b)));
                }
            }
            for (x1, x2) in pairs {
                let gap = step_dead_zone(x2, eta, delta) - step_dead_zone(x1, eta, delta);
                min_monotone_gap = min_monotone_gap.min(gap);
                v.assert_strict(gap, || {
                    format!(
                        "eta={eta}, delta={delta}: update map not increasing on \
                         ({x1}, {x2}): F(x1)={}, F(x2)={}",
                        step_dead_zone(x1, eta, delta),
                        step_dead_zone(x2, eta, delta)
                    )
                });
            }
        }
    }
    v.detail = json!({
        "min_dominance_gap": min_dominance_gap,
        "min_monotone_gap": min_monotone_gap,
    });
    v
}

/// Check empirical right-tail dominance of a population evolved under the
/// dead-zone dynamics against the same population evolved plainly.
///
/// At every threshold z inside the pooled support the dead-zone tail
/// probability must be at least the plain one, and for δ > 0 the two
/// empirical distributions must actually separate somewhere (wherever they
/// differ, the ordering constraint already forces the gap to favor the
/// dead-zone side). Thresholds outside the pooled support are boundary
/// points where both tails are 0 or 1 and only the ordering is required.
pub fn check_tail_dominance(
    population: &[f64],
    eta: f64,
    delta: f64,
    steps: usize,
    z_grid: &[f64],
) -> Verdict {
    let grid = format!(
        "population {} evolved {} steps, eta={eta}, delta={delta}, {} thresholds",
        population.len(),
        steps,
        z_grid.len()
    );
    let mut v = Verdict::new("tail_dominance", grid);
    if population.len() < 1000 {
        v.fail(format!(
            "population of {} is below the 1000 required for a meaningful tail comparison",
            population.len()
        ));
        return v;
    }
    let n = population.len() as f64;
    let mut plain = Vec::with_capacity(population.len());
    let mut dead_zone = Vec::with_capacity(population.len());
    for &c0 in population {
        let mut p = c0;
        let mut d = c0;
        for _ in 0..steps {
            p = step_plain(p, eta);
            d = step_dead_zone(d, eta, delta);
        }
        plain.push(p);
        dead_zone.push(d);
    }
    let pooled_min = plain
        .iter()
        .chain(&dead_zone)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let pooled_max = plain
        .iter()
        .chain(&dead_zone)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let tail = |xs: &[f64], z: f64| xs.iter().filter(|&&x| x >= z).count() as f64 / n;
    let mut strict_interior = 0usize;
    let mut max_gap = f64::NEG_INFINITY;
    for &z in z_grid {
        let tp = tail(&plain, z);
        let td = tail(&dead_zone, z);
        let gap = td - tp;
        max_gap = max_gap.max(gap);
        if z > pooled_min && z <= pooled_max && gap > 0.0 {
            strict_interior += 1;
        }
        v.assert_at_least(gap, || {
            format!(
                "z={z}: dead-zone tail {td} below plain tail {tp} \
                 (pooled support [{pooled_min}, {pooled_max}])"
            )
        });
    }
    if delta > 0.0 && strict_interior == 0 {
        v.fail(format!(
            "delta={delta} > 0 but the tails never strictly separated on the grid"
        ));
    }
    v.detail = json!({
        "pooled_support": [pooled_min, pooled_max],
        "strict_interior_points": strict_interior,
        "max_gap": max_gap,
    });
    v
}

/// Limits under which full trajectory enumeration stays exact and cheap.
const MAX_ENUM_STATES: usize = 4;
const MAX_ENUM_ACTIONS: usize = 3;
const MAX_ENUM_HORIZON: usize = 4;

/// Verify, by exact trajectory enumeration on a tiny MDP with a tabular
/// softmax policy, that the policy gradient of expected discounted cost
/// equals Cov(C, score) and obeys the coordinate-wise Cauchy–Schwarz bound
/// Cov(C, score_i)² ≤ Var(C) · Var(score_i), and that the score function
/// (the gradient of log trajectory probability in the logits) has exactly
/// zero mean under the policy's own trajectory distribution.
///
/// The aggregate form ‖∇J_C‖² ≤ Var(C) · Σ_i Var(score_i) follows by summing
/// the coordinate-wise bound; both sides of it are reported in the verdict.
pub fn check_score_covariance_bound(
    mdp: &TabularMdp,
    logits: &[Vec<f64>],
    gamma: f64,
    horizon: usize,
) -> Result<Verdict> {
    if mdp.n_states > MAX_ENUM_STATES
        || mdp.n_actions > MAX_ENUM_ACTIONS
        || horizon > MAX_ENUM_HORIZON
    {
        return Err(Error::InvalidArgument(format!(
            "enumeration check needs at most {MAX_ENUM_STATES} states, \
             {MAX_ENUM_ACTIONS} actions, horizon {MAX_ENUM_HORIZON}; \
             got {} states, {} actions, horizon {horizon}",
            mdp.n_states, mdp.n_actions
        )));
    }
    if logits.len() != mdp.n_states || logits.iter().any(|row| row.len() != mdp.n_actions) {
        return Err(Error::Shape(format!(
            "logit table must be {} x {}",
            mdp.n_states, mdp.n_actions
        )));
    }
    let policy = softmax_policy(logits);
    let trajectories = mdp.enumerate_trajectories(&policy, horizon)?;
    let dim = mdp.n_states * mdp.n_actions;

    // Exact expectations over the enumerated trajectory distribution.
    let mut mass: f64 = 0.0;
    let mut mean_c = 0.0;
    let mut mean_c2 = 0.0;
    let mut mean_score = vec![0.0f64; dim];
    let mut mean_score2 = vec![0.0f64; dim];
    let mut mean_c_score = vec![0.0f64; dim];
    let mut score = vec![0.0f64; dim];
    for (prob, steps) in &trajectories {
        let prob = *prob;
        let c = mdp.trajectory_cost(steps, gamma);
        score.iter_mut().for_each(|x| *x = 0.0);
        for &(s, a) in steps {
            for j in 0..mdp.n_actions {
                let indicator = if j == a { 1.0 } else { 0.0 };
                score[s * mdp.n_actions + j] += indicator - policy.probs[s][j];
            }
        }
        mass += prob;
        mean_c += prob * c;
        mean_c2 += prob * c * c;
        for i in 0..dim {
            mean_score[i] += prob * score[i];
            mean_score2[i] += prob * score[i] * score[i];
            mean_c_score[i] += prob * c * score[i];
        }
    }

    let grid = format!(
        "{} states x {} actions, horizon {horizon}, gamma {gamma}, {} trajectories",
        mdp.n_states,
        mdp.n_actions,
        trajectories.len()
    );
    let mut v = Verdict::new("score_covariance_bound", grid);
    v.assert_at_least(1e-12 - (mass - 1.0).abs(), || {
        format!("enumerated probability mass {mass} is not 1")
    });
    let var_c = mean_c2 - mean_c * mean_c;
    let mut grad_norm_sq = 0.0;
    let mut total_score_var = 0.0;
    let mut min_slack = f64::INFINITY;
    for i in 0..dim {
        v.assert_at_least(1e-12 - mean_score[i].abs(), || {
            format!("score coordinate {i} has mean {} instead of 0", mean_score[i])
        });
        // E[score] = 0, so E[C·score_i] is exactly Cov(C, score_i) and the
        // centered score variance is E[score_i²].
        let cov = mean_c_score[i];
        let var_s = mean_score2[i] - mean_score[i] * mean_score[i];
        let slack = var_c * var_s - cov * cov;
        min_slack = min_slack.min(slack);
        grad_norm_sq += cov * cov;
        total_score_var += var_s;
        let tol = 1e-12 * (1.0 + var_c * var_s);
        v.assert_at_least(slack + tol, || {
            format!(
                "coordinate {i}: Cov(C, score)^2 = {} exceeds Var(C)·Var(score) = {}",
                cov * cov,
                var_c * var_s
            )
        });
    }
    let norm_rhs = var_c * total_score_var;
    v.assert_at_least(norm_rhs - grad_norm_sq + 1e-12 * (1.0 + norm_rhs), || {
        format!("aggregate bound failed: |grad|^2 = {grad_norm_sq}, bound = {norm_rhs}")
    });
    v.detail = json!({
        "grad_norm_sq": grad_norm_sq,
        "var_cost": var_c,
        "total_score_var": total_score_var,
        "norm_bound": norm_rhs,
        "min_coordinate_slack": min_slack,
        "max_abs_mean_score": mean_score.iter().fold(0.0f64, |m, x| m.max(x.abs())),
    });
    Ok(v)
}

/// Three-state, two-action chain with stochastic forward moves and
/// state-dependent costs: small enough to enumerate, rich enough that
/// costs and visitation actually vary across trajectories.
pub fn enumeration_test_mdp() -> TabularMdp {
    TabularMdp {
        start: 0,
        n_states: 3,
        n_actions: 2,
        transitions: vec![
            vec![vec![(0, 1.0)], vec![(1, 0.8), (0, 0.2)]],
            vec![vec![(1, 1.0)], vec![(2, 0.8), (1, 0.2)]],
            vec![vec![(2, 1.0)], vec![(2, 1.0)]],
        ],
        reward: vec![
            vec![0.0, 0.0],
            vec![0.1, 0.1],
            vec![1.0, 1.0],
        ],
        cost: vec![
            vec![0.0, 0.2],
            vec![0.1, 0.7],
            vec![1.0, 1.0],
        ],
    }
}

/// Run every check at its default grid, seeding all randomness from `seed`.
///
/// Grids follow the documented defaults: a dense cost grid with four
/// dead-zone widths for gradient dominance; a 3 x 3 x 3 configuration grid
/// iterated 1000 steps for iterate dominance; a 1000-sample standard-normal
/// population evolved 200 steps for tail dominance; and a three-state chain
/// with randomized logits for the enumeration bound.
pub fn default_verification_suite(seed: u64) -> Result<Vec<Verdict>> {
    let c_grid: Vec<f64> = (0..=2000).map(|i| -10.0 + 0.01 * i as f64).collect();
    let gradient = check_gradient_dominance(&c_grid, &[0.1, 0.5, 1.0, 2.0]);

    let iterate = check_iterate_dominance(
        &[-5.0, 0.0, 5.0],
        &[0.1, 1.0, 3.9],
        &[0.1, 1.0, 2.0],
        1000,
        64,
        seed,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 23));
    let population: Vec<f64> = (0..1000)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let z_grid: Vec<f64> = (0..256).map(|i| -5.0 + 15.0 * i as f64 / 255.0).collect();
    let tail = check_tail_dominance(&population, 0.5, 1.0, 200, &z_grid);

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 29));
    let mdp = enumeration_test_mdp();
    let logits: Vec<Vec<f64>> = (0..mdp.n_states)
        .map(|_| (0..mdp.n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let bound = check_score_covariance_bound(&mdp, &logits, 0.99, 3)?;

    Ok(vec![gradient, iterate, tail, bound])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Distribution;

    #[test]
    fn safe_gradient_reference_values() {
        assert!((grad_safe(0.0) + 0.5).abs() < 1e-12);
        assert!((grad_safe(1.0) + 0.268_941_421_369_995_1).abs() < 1e-12);
        // Saturation: full push toward higher estimates while far below zero,
        // vanishing push once the estimate is already large.
        assert!(grad_safe(-20.0) > -1.0 && grad_safe(-20.0) < -0.999_999);
        assert!(grad_safe(20.0) < 0.0 && grad_safe(20.0) > -1e-8);
        for c in [-8.0, -1.0, 0.0, 1.0, 8.0] {
            let g = grad_safe(c);
            assert!(g > -1.0 && g < 0.0, "grad_safe({c}) = {g} out of (-1, 0)");
        }
    }

    #[test]
    fn dead_zone_gradient_reference_values() {
        // delta = 0 reduces to the plain gradient pointwise.
        for c in [-3.0, -0.5, 0.0, 0.5, 3.0] {
            assert_eq!(grad_safe_dz(c, 0.0).unwrap(), grad_safe(c));
        }
        assert!((grad_safe_dz(0.0, 1.0).unwrap() + 0.731_058_578_630_004_9).abs() < 1e-12);
        // c at the dead-zone edge sits at the sigmoid midpoint.
        assert!((grad_safe_dz(2.5, 2.5).unwrap() + 0.5).abs() < 1e-12);
        assert!(grad_safe_dz(0.0, -0.1).is_err());
    }

    #[test]
    fn gradient_dominance_holds_on_dense_grid() {
        let c_grid: Vec<f64> = (0..=2000).map(|i| -10.0 + 0.01 * i as f64).collect();
        let v = check_gradient_dominance(&c_grid, &[0.1, 0.5, 1.0, 2.0]);
        assert!(v.pass, "counterexamples: {:?}", v.counterexamples);
        assert_eq!(v.violations, 0);
        assert_eq!(v.checked, 2 * 4 * 2001);
        assert!(v.min_margin > 0.0);
    }

    #[test]
    fn gradient_dominance_detects_zero_width_equality() {
        let v = check_gradient_dominance(&[0.0, 1.0], &[0.0]);
        assert!(!v.pass);
        assert_eq!(v.violations, 2);
        assert!(v.counterexamples[0].contains("equality"));
        // Single-point sanity values from the gradient definitions.
        let strict = check_gradient_dominance(&[0.0], &[1.0]);
        assert!(strict.pass);
        assert!((strict.min_margin - (-0.5 + 0.731_058_578_630_004_9)).abs() < 1e-12);
    }

    #[test]
    fn dynamics_one_step_hand_values() {
        let tr = simulate_dynamics(0.0, 1.0, 1.0, 1);
        assert_eq!(tr.plain.len(), 2);
        assert_eq!(tr.dead_zone.len(), 2);
        assert_eq!(tr.plain[0], tr.dead_zone[0]);
        assert!((tr.plain[1] - 0.5).abs() < 1e-12);
        assert!((tr.dead_zone[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn dynamics_degenerate_cases() {
        // Zero width: the two sequences are bitwise identical.
        let tr = simulate_dynamics(-2.0, 0.7, 0.0, 50);
        assert_eq!(tr.plain, tr.dead_zone);
        // Zero step size: both constant at the start value.
        let tr = simulate_dynamics(1.5, 0.0, 1.0, 10);
        assert!(tr.plain.iter().all(|&x| x == 1.5));
        assert!(tr.dead_zone.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn iterate_dominance_holds_on_default_grid() {
        let v = check_iterate_dominance(
            &[-5.0, 0.0, 5.0],
            &[0.1, 1.0, 3.9],
            &[0.1, 1.0, 2.0],
            1000,
            64,
            7,
        );
        assert!(v.pass, "counterexamples: {:?}", v.counterexamples);
        assert!(v.min_margin > 0.0);
        // 27 configurations x 1000 steps of dominance plus monotonicity pairs.
        assert!(v.checked > 27_000);
    }

    #[test]
    fn iterate_dominance_catches_oversized_step() {
        // Above the step-size bound of 4 the update map is no longer
        // increasing near the dead-zone edge, and the check must say so.
        let v = check_iterate_dominance(&[0.0], &[8.0], &[1.0], 5, 16, 7);
        assert!(!v.pass);
        assert!(v
            .counterexamples
            .iter()
            .any(|c| c.contains("not increasing")));
    }

    #[test]
    fn iterate_dominance_gap_grows_with_time() {
        // The dead-zone trajectory shifted down by delta follows the plain
        // dynamics from a lower start, so the dominance gap is monotone in t.
        let tr = simulate_dynamics(-1.0, 0.5, 1.0, 300);
        let mut last = 0.0;
        for t in 1..=300 {
            let gap = tr.dead_zone[t] - tr.plain[t];
            assert!(gap > last, "gap shrank at t={t}");
            last = gap;
        }
    }

    fn normal_population(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect()
    }

    #[test]
    fn tail_dominance_holds_for_evolved_population() {
        let population = normal_population(1000, 11);
        let z_grid: Vec<f64> = (0..256).map(|i| -5.0 + 15.0 * i as f64 / 255.0).collect();
        let v = check_tail_dominance(&population, 0.5, 1.0, 200, &z_grid);
        assert!(v.pass, "counterexamples: {:?}", v.counterexamples);
        assert!(v.detail["strict_interior_points"].as_u64().unwrap() > 0);
        assert!(v.detail["max_gap"].as_f64().unwrap() > 0.5);
    }

    #[test]
    fn tail_dominance_is_equality_at_zero_width() {
        let population = normal_population(1000, 13);
        let z_grid: Vec<f64> = (0..64).map(|i| -4.0 + 12.0 * i as f64 / 63.0).collect();
        let v = check_tail_dominance(&population, 0.5, 0.0, 100, &z_grid);
        assert!(v.pass);
        assert_eq!(v.detail["strict_interior_points"].as_u64().unwrap(), 0);
        assert_eq!(v.detail["max_gap"].as_f64().unwrap(), 0.0);
        assert_eq!(v.min_margin, 0.0);
    }

    #[test]
    fn tail_dominance_rejects_small_population() {
        let v = check_tail_dominance(&[0.0; 10], 0.5, 1.0, 10, &[0.0]);
        assert!(!v.pass);
        assert!(v.counterexamples[0].contains("below the 1000"));
    }

    #[test]
    fn score_bound_holds_on_enumeration_mdp() {
        let mdp = enumeration_test_mdp();
        let logits = vec![vec![0.3, -0.2], vec![-0.5, 0.9], vec![0.0, 0.4]];
        let v = check_score_covariance_bound(&mdp, &logits, 0.99, 3).unwrap();
        assert!(v.pass, "counterexamples: {:?}", v.counterexamples);
        let lhs = v.detail["grad_norm_sq"].as_f64().unwrap();
        let rhs = v.detail["norm_bound"].as_f64().unwrap();
        assert!(lhs <= rhs);
        assert!(v.detail["var_cost"].as_f64().unwrap() > 0.0);
        assert!(v.detail["max_abs_mean_score"].as_f64().unwrap() < 1e-12);
    }

    #[test]
    fn score_bound_gradient_matches_finite_differences() {
        // Independent check of the enumeration path: the covariance form of
        // the policy gradient must agree with central finite differences of
        // the exactly evaluated objective through backward induction.
        let mdp = enumeration_test_mdp();
        let logits = vec![vec![0.3, -0.2], vec![-0.5, 0.9], vec![0.0, 0.4]];
        let gamma = 0.99;
        let horizon = 3;
        let policy = softmax_policy(&logits);
        let trajectories = mdp.enumerate_trajectories(&policy, horizon).unwrap();
        let mut grad = vec![0.0; mdp.n_states * mdp.n_actions];
        for (prob, steps) in &trajectories {
            let c = mdp.trajectory_cost(steps, gamma);
            for &(s, a) in steps {
                for j in 0..mdp.n_actions {
                    let indicator = if j == a { 1.0 } else { 0.0 };
                    grad[s * mdp.n_actions + j] += prob * c * (indicator - policy.probs[s][j]);
                }
            }
        }
        let h = 1e-6;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let mut plus = logits.clone();
                plus[s][a] += h;
                let mut minus = logits.clone();
                minus[s][a] -= h;
                let jp = mdp
                    .expected_discounted_cost(&softmax_policy(&plus), gamma, horizon)
                    .unwrap();
                let jm = mdp
                    .expected_discounted_cost(&softmax_policy(&minus), gamma, horizon)
                    .unwrap();
                let fd = (jp - jm) / (2.0 * h);
                let got = grad[s * mdp.n_actions + a];
                assert!(
                    (fd - got).abs() < 1e-6 * (1.0 + fd.abs()),
                    "grad[{s}][{a}]: enumeration {got} vs finite difference {fd}"
                );
            }
        }
    }

    #[test]
    fn score_bound_constant_cost_degenerates_to_equality() {
        let mut mdp = enumeration_test_mdp();
        mdp.cost = vec![vec![0.4; 2]; 3];
        let logits = vec![vec![0.1, -0.3], vec![0.2, 0.0], vec![-0.1, 0.5]];
        let v = check_score_covariance_bound(&mdp, &logits, 1.0, 3).unwrap();
        assert!(v.pass);
        // Constant trajectory cost: zero variance, zero gradient, 0 <= 0.
        assert!(v.detail["var_cost"].as_f64().unwrap().abs() < 1e-12);
        assert!(v.detail["grad_norm_sq"].as_f64().unwrap() < 1e-20);
    }

    #[test]
    fn score_bound_refuses_large_instances() {
        let mdp = enumeration_test_mdp();
        let logits = vec![vec![0.0, 0.0]; 3];
        assert!(check_score_covariance_bound(&mdp, &logits, 0.99, 9).is_err());
        let mut wide = mdp.clone();
        wide.n_states = 5;
        assert!(check_score_covariance_bound(&wide, &logits, 0.99, 3).is_err());
    }

    #[test]
    fn default_suite_passes_and_serializes() {
        let verdicts = default_verification_suite(42).unwrap();
        assert_eq!(verdicts.len(), 4);
        for v in &verdicts {
            assert!(v.pass, "{} failed: {:?}", v.claim, v.counterexamples);
            let text = serde_json::to_string(v).unwrap();
            let back: Verdict = serde_json::from_str(&text).unwrap();
            assert_eq!(back.claim, v.claim);
            assert_eq!(back.pass, v.pass);
        }
        let names: Vec<&str> = verdicts.iter().map(|v| v.claim.as_str()).collect();
        assert_eq!(
            names,
            [
                "gradient_dominance",
                "iterate_dominance",
                "tail_dominance",
                "score_covariance_bound"
            ]
        );
    }
}
