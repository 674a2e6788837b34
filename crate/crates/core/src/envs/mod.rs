//! Toy chunked-control environments, scripted behaviors and exact oracles.
//!
//! All dynamics are closed form:
//!
//! | env | obs | action | horizon | reward |
//! |---|---|---|---|---|
//! | `bandit` | `[0]` | 2 | 1 | 1 inside a disc of radius 0.15 around `(±0.6, 0)` |
//! | `pointmass` | `(x, y, gx, gy)` | 2 | 60 | 1 on entering the goal disc (radius 0.1), then terminal |
//! | `rotator` | `(cos θ, sin θ, θ / 2π)` | 1 | 100 | 1 per new multiple of 90°; drops terminate |
//! | `tabular` | one-hot state | 2 | configurable | table lookup |
//!
//! Raw actions live in `[-1, 1]^A` and are clipped before use.

pub mod bandit;
pub mod pointmass;
mod rollout;
pub mod rotator;
pub mod tabular;

pub use bandit::MultimodalBandit;
pub use pointmass::ChunkedPointMass;
pub use rollout::{
    aggregate, episode_seed, evaluate, gen_demos, make_demonstrator, rollout, summarize, Actor,
    BanditDemo, EvalMetrics, PointMassTeacher, RandomActor, RotatorTeacher, SeedSummary,
};
pub use rotator::ToyRotator;
pub use tabular::{
    atomic_action, bellman_residual, chunk_actions, chunk_vector, dp_chunk_q, num_chunks, DpMethod,
    TabularChunkMDP, TabularPolicy, ACTION_POINTS, MAX_CHUNK_LEN,
};

use crate::data::RewardRule;
use crate::error::{Error, Result};

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub obs: Vec<f64>,
    pub done: bool,
}

/// Outcome of an open-loop chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkStep {
    /// One entry per executed step (shorter than `H` if the episode ended).
    pub rewards: Vec<f64>,
    pub obs: Vec<f64>,
    pub done: bool,
}

/// Episodic environment stepped one action at a time or one chunk at a time.
pub trait ChunkEnv: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reward_rule(&self) -> Option<RewardRule>;

    /// Starts an episode; the same seed always produces the same episode
    /// under the same actions.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Step;
    /// Whether the current episode has met the task's success predicate.
    fn success(&self) -> bool;

    /// Executes `chunk` (`n * A` values) until it is exhausted or the episode ends.
    fn step_chunk(&mut self, chunk: &[f64]) -> ChunkStep {
        let a = self.action_dim();
        let mut rewards = Vec::new();
        let mut obs = Vec::new();
        let mut done = false;
        for act in chunk.chunks(a) {
            let s = self.step(act);
            rewards.push(s.reward);
            obs = s.obs;
            done = s.done;
            if done {
                break;
            }
        }
        ChunkStep { rewards, obs, done }
    }

    fn boxed_clone(&self) -> Box<dyn ChunkEnv>;
}

/// Names accepted by [`make_env`].
pub const ENV_NAMES: [&str; 4] = ["bandit", "pointmass", "rotator", "tabular"];

/// Environment registry.
pub fn make_env(name: &str) -> Result<Box<dyn ChunkEnv>> {
    match name {
        "bandit" => Ok(Box::new(MultimodalBandit::new())),
        "pointmass" => Ok(Box::new(ChunkedPointMass::new())),
        "rotator" => Ok(Box::new(ToyRotator::new())),
        "tabular" => Ok(Box::new(TabularChunkMDP::example(12))),
        _ => Err(Error::Config(format!(
            "unknown environment '{name}' (known: {})",
            ENV_NAMES.join(", ")
        ))),
    }
}

pub(crate) fn clip_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}
