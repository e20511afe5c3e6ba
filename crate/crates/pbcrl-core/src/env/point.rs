//! Planar point-mass environment with circular hazards.
//!
//! The agent accelerates a damped point toward a goal; entering a hazard disc
//! costs 1 per step. Reaching the goal pays a bonus and relocates the goal
//! (seeded), so episodes never run out of objective. Apart from goal
//! relocation the dynamics are deterministic given the action sequence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Action, ActionSpec, Environment, StepOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointConfig {
    /// Positions live in `[-arena_half, arena_half]^2`.
    pub arena_half: f64,
    pub hazards: Vec<Circle>,
    pub start: [f64; 2],
    pub goal_radius: f64,
    pub goal_bonus: f64,
    /// Minimum distance between a freshly sampled goal and the current
    /// position, keeps relocated goals non-trivial.
    pub goal_min_dist: f64,
    pub threshold: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl Default for PointConfig {
    fn default() -> Self {
        PointConfig {
            arena_half: 4.0,
            hazards: vec![
                Circle {
                    cx: 0.0,
                    cy: 0.0,
                    r: 1.2,
                },
                Circle {
                    cx: 2.2,
                    cy: -1.8,
                    r: 0.9,
                },
            ],
            start: [-3.0, -3.0],
            goal_radius: 0.4,
            goal_bonus: 2.0,
            goal_min_dist: 1.5,
            threshold: 5.0,
            gamma: 0.99,
            horizon: 64,
        }
    }
}

impl PointConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.arena_half > 0.0) {
            problems.push(format!("arena_half: must be positive, got {}", self.arena_half));
        }
        for (i, h) in self.hazards.iter().enumerate() {
            if !(h.r > 0.0) {
                problems.push(format!("hazards[{i}].r: must be positive, got {}", h.r));
            }
            if h.cx.abs() + h.r > self.arena_half || h.cy.abs() + h.r > self.arena_half {
                problems.push(format!("hazards[{i}]: disc leaves the arena"));
            }
        }
        if self.start[0].abs() > self.arena_half || self.start[1].abs() > self.arena_half {
            problems.push("start: outside the arena".into());
        }
        if self.hazards.iter().any(|h| h.contains(self.start[0], self.start[1])) {
            problems.push("start: inside a hazard".into());
        }
        if !(self.goal_radius > 0.0) {
            problems.push(format!("goal_radius: must be positive, got {}", self.goal_radius));
        }
        if !(self.goal_min_dist >= 0.0) {
            problems.push("goal_min_dist: must be >= 0".into());
        }
        if self.goal_min_dist >= 2.0 * self.arena_half {
            problems.push("goal_min_dist: unsatisfiable inside the arena".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            problems.push(format!("gamma: must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.threshold >= 0.0) {
            problems.push(format!("threshold: must be >= 0, got {}", self.threshold));
        }
        if self.horizon == 0 {
            problems.push("horizon: must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                problems.into_iter().map(|p| format!("env.point.{p}")).collect(),
            ))
        }
    }
}

const VEL_DECAY: f64 = 0.85;
const ACCEL_GAIN: f64 = 0.30;
const POS_GAIN: f64 = 0.5;
const MAX_SPEED: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct PointHazard {
    cfg: PointConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    t: usize,
    rng: ChaCha8Rng,
}

impl PointHazard {
    pub fn new(cfg: PointConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PointHazard {
            pos: cfg.start,
            vel: [0.0, 0.0],
            goal: cfg.start,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            cfg,
        })
    }

    pub fn config(&self) -> &PointConfig {
        &self.cfg
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    fn in_hazard(&self, p: [f64; 2]) -> bool {
        self.cfg.hazards.iter().any(|h| h.contains(p[0], p[1]))
    }

    fn sample_goal(&mut self) -> [f64; 2] {
        // Rejection sampling: outside hazards (with a margin) and not too
        // close to the current position. The feasible region is most of the
        // arena, so this terminates fast; a deterministic fallback guards
        // pathological configs.
        let half = self.cfg.arena_half;
        for _ in 0..256 {
            let gx = self.rng.random_range(-half..half);
            let gy = self.rng.random_range(-half..half);
            let clear = !self
                .cfg
                .hazards
                .iter()
                .any(|h| Circle { r: h.r + self.cfg.goal_radius, ..*h }.contains(gx, gy));
            let dx = gx - self.pos[0];
            let dy = gy - self.pos[1];
            if clear && (dx * dx + dy * dy).sqrt() >= self.cfg.goal_min_dist {
                return [gx, gy];
            }
        }
        [half * 0.9, half * 0.9]
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0] - self.pos[0],
            self.goal[1] - self.pos[1],
        ]
    }

    fn dist_to_goal(&self) -> f64 {
        let dx = self.goal[0] - self.pos[0];
        let dy = self.goal[1] - self.pos[1];
        (dx * dx + dy * dy).sqrt()
    }
}

impl Environment for PointHazard {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = self.cfg.start;
        self.vel = [0.0, 0.0];
        self.t = 0;
        self.goal = self.sample_goal();
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let a = match action {
            Action::Continuous(v) if v.len() == 2 => [v[0].clamp(-1.0, 1.0), v[1].clamp(-1.0, 1.0)],
            Action::Continuous(v) => {
                return Err(Error::Shape(format!(
                    "point action has dim {}, expected 2",
                    v.len()
                )))
            }
            Action::Discrete(_) => {
                return Err(Error::InvalidArgument(
                    "point takes continuous actions".into(),
                ))
            }
        };
        if self.t >= self.cfg.horizon {
            return Err(Error::InvalidArgument(
                "step called past the horizon; reset first".into(),
            ));
        }
        // cost charged for occupying a hazard when acting, like the chain
        let cost = if self.in_hazard(self.pos) { 1.0 } else { 0.0 };
        let before = self.dist_to_goal();
        for i in 0..2 {
            self.vel[i] = (VEL_DECAY * self.vel[i] + ACCEL_GAIN * a[i]).clamp(-MAX_SPEED, MAX_SPEED);
            self.pos[i] =
                (self.pos[i] + POS_GAIN * self.vel[i]).clamp(-self.cfg.arena_half, self.cfg.arena_half);
        }
        let mut reward = before - self.dist_to_goal();
        if self.dist_to_goal() <= self.cfg.goal_radius {
            reward += self.cfg.goal_bonus;
            self.goal = self.sample_goal();
        }
        self.t += 1;
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            cost,
            done: self.t >= self.cfg.horizon,
        })
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    fn threshold(&self) -> f64 {
        self.cfg.threshold
    }

    fn obs_dim(&self) -> usize {
        6
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Box {
            dim: 2,
            low: -1.0,
            high: 1.0,
        }
    }

    fn name(&self) -> &'static str {
        "point-hazard"
    }
}
