use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_unit, ChunkEnv, Step};
use crate::data::RewardRule;

/// Radians of rotation per unit command per step.
pub const GAIN: f64 = 0.4;
pub const HORIZON: usize = 100;
/// Seconds per step, for the rotations-per-minute metric.
pub const DT: f64 = 0.1;
/// Quarter turns needed for an episode to count as a success.
pub const SUCCESS_QUARTERS: i64 = 4;

pub fn advance(theta: f64, a: f64) -> f64 {
    theta + GAIN * clip_unit(a)
}

/// Completed quarter turns of positive rotation.
pub fn quarters(theta: f64) -> i64 {
    (theta / FRAC_PI_2).floor() as i64
}

/// Per-step drop probability `min(0.25, 0.02 + 0.3 |a|^3)`.
pub fn drop_probability(a: f64) -> f64 {
    (0.02 + 0.3 * clip_unit(a).abs().powi(3)).min(0.25)
}

/// Single-axis in-hand rotation analogue: fast commands rotate more but
/// risk dropping the object, which ends the episode.
#[derive(Clone, Debug)]
pub struct ToyRotator {
    theta: f64,
    best: i64,
    t: usize,
    dropped: bool,
    rng: ChaCha8Rng,
}

impl Default for ToyRotator {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyRotator {
    pub fn new() -> Self {
        Self {
            theta: 0.0,
            best: 0,
            t: 0,
            dropped: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn rotation(&self) -> f64 {
        self.theta
    }

    pub fn dropped(&self) -> bool {
        self.dropped
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta / TAU]
    }
}

impl ChunkEnv for ToyRotator {
    fn name(&self) -> &'static str {
        "rotator"
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reward_rule(&self) -> Option<RewardRule> {
        Some(RewardRule::RotationQuarters)
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = 0.0;
        self.best = 0;
        self.t = 0;
        self.dropped = false;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        self.theta = advance(self.theta, action[0]);
        let q = quarters(self.theta);
        let reward = (q - self.best).max(0) as f64;
        self.best = self.best.max(q);
        self.t += 1;
        self.dropped = self.rng.gen::<f64>() < drop_probability(action[0]);
        Step {
            reward,
            obs: self.obs(),
            done: self.dropped || self.t >= HORIZON,
        }
    }

    fn success(&self) -> bool {
        self.best >= SUCCESS_QUARTERS
    }

    fn boxed_clone(&self) -> Box<dyn ChunkEnv> {
        Box::new(self.clone())
    }
}
