use super::{ChunkEnv, Step};
use crate::data::RewardRule;

pub const MODES: [[f64; 2]; 2] = [[0.6, 0.0], [-0.6, 0.0]];
pub const MODE_RADIUS: f64 = 0.15;

/// Index of the mode whose disc contains `a`, if any.
pub fn mode_of(a: &[f64]) -> Option<usize> {
    MODES.iter().position(|m| {
        let (dx, dy) = (a[0] - m[0], a[1] - m[1]);
        (dx * dx + dy * dy).sqrt() < MODE_RADIUS
    })
}

pub fn in_mode(a: &[f64]) -> bool {
    mode_of(a).is_some()
}

/// One-step task with two symmetric rewarding action discs.
#[derive(Clone, Debug, Default)]
pub struct MultimodalBandit {
    success: bool,
}

impl MultimodalBandit {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ChunkEnv for MultimodalBandit {
    fn name(&self) -> &'static str {
        "bandit"
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        1
    }

    fn reward_rule(&self) -> Option<RewardRule> {
        Some(RewardRule::BanditModes)
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.success = false;
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let a = [super::clip_unit(action[0]), super::clip_unit(action[1])];
        self.success = in_mode(&a);
        Step {
            reward: f64::from(u8::from(self.success)),
            obs: vec![0.0],
            done: true,
        }
    }

    fn success(&self) -> bool {
        self.success
    }

    fn boxed_clone(&self) -> Box<dyn ChunkEnv> {
        Box::new(self.clone())
    }
}
