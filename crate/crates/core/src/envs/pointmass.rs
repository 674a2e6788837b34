use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_unit, ChunkEnv, Step};
use crate::data::RewardRule;

pub const STEP_SCALE: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 0.1;
pub const HORIZON: usize = 60;
/// Start and goal are drawn from `[-SPAWN, SPAWN]^2`.
pub const SPAWN: f64 = 0.8;
pub const MIN_START_DISTANCE: f64 = 0.5;

/// `clip(x + 0.1 * clip(a), -1, 1)`.
pub fn advance(pos: [f64; 2], a: &[f64]) -> [f64; 2] {
    [
        clip_unit(pos[0] + STEP_SCALE * clip_unit(a[0])),
        clip_unit(pos[1] + STEP_SCALE * clip_unit(a[1])),
    ]
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn in_goal(pos: [f64; 2], goal: [f64; 2]) -> bool {
    distance(pos, goal) < GOAL_RADIUS
}

/// Planar point mass with velocity commands and a sparse goal-entry reward.
#[derive(Clone, Debug)]
pub struct ChunkedPointMass {
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    success: bool,
    horizon: usize,
}

impl Default for ChunkedPointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl ChunkedPointMass {
    pub fn new() -> Self {
        Self {
            pos: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            success: false,
            horizon: HORIZON,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]]
    }
}

impl ChunkEnv for ChunkedPointMass {
    fn name(&self) -> &'static str {
        "pointmass"
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward_rule(&self) -> Option<RewardRule> {
        Some(RewardRule::GoalEntry)
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || [rng.gen_range(-SPAWN..SPAWN), rng.gen_range(-SPAWN..SPAWN)];
        self.pos = draw();
        self.goal = draw();
        while distance(self.pos, self.goal) < MIN_START_DISTANCE {
            self.goal = draw();
        }
        self.t = 0;
        self.success = false;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let next = advance(self.pos, action);
        let entered = !in_goal(self.pos, self.goal) && in_goal(next, self.goal);
        self.pos = next;
        self.t += 1;
        if entered {
            self.success = true;
        }
        Step {
            reward: f64::from(u8::from(entered)),
            obs: self.obs(),
            done: self.success || self.t >= self.horizon,
        }
    }

    fn success(&self) -> bool {
        self.success
    }

    fn boxed_clone(&self) -> Box<dyn ChunkEnv> {
        Box::new(self.clone())
    }
}
