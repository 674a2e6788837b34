use super::Episode;
use crate::envs::{bandit, pointmass, rotator};
use crate::error::{Error, Result};

/// Sparse reward rules recomputed from stored observations and actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardRule {
    /// +1 on the step whose action moves the point mass into the goal disc.
    GoalEntry,
    /// +1 for an action inside either bandit mode.
    BanditModes,
    /// +1 per newly reached multiple of 90° of positive rotation.
    RotationQuarters,
}

impl RewardRule {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "goal_entry" => Ok(Self::GoalEntry),
            "bandit_modes" => Ok(Self::BanditModes),
            "rotation_quarters" => Ok(Self::RotationQuarters),
            _ => Err(Error::Config(format!("unknown reward rule '{name}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GoalEntry => "goal_entry",
            Self::BanditModes => "bandit_modes",
            Self::RotationQuarters => "rotation_quarters",
        }
    }

    /// Per-step rewards for the episode's observations and actions.
    pub fn rewards(self, e: &Episode) -> Vec<f64> {
        let t = e.len();
        match self {
            Self::GoalEntry => (0..t)
                .map(|i| {
                    let o = e.observations.row(i);
                    let (pos, goal) = ([o[0], o[1]], [o[2], o[3]]);
                    let next = pointmass::advance(pos, e.actions.row(i));
                    let was_in = pointmass::in_goal(pos, goal);
                    if !was_in && pointmass::in_goal(next, goal) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            Self::BanditModes => (0..t)
                .map(|i| f64::from(u8::from(bandit::in_mode(e.actions.row(i)))))
                .collect(),
            Self::RotationQuarters => {
                let mut best = e
                    .observations
                    .row(0)
                    .get(2)
                    .map_or(0, |&th| rotator::quarters(th * std::f64::consts::TAU));
                (0..t)
                    .map(|i| {
                        let theta = e.observations.row(i)[2] * std::f64::consts::TAU;
                        let next = rotator::advance(theta, e.actions.row(i)[0]);
                        let q = rotator::quarters(next);
                        let r = (q - best).max(0);
                        best = best.max(q);
                        r as f64
                    })
                    .collect()
            }
        }
    }

    /// Success predicate on labelled rewards.
    pub fn success(self, rewards: &[f64]) -> bool {
        let total: f64 = rewards.iter().sum();
        match self {
            Self::GoalEntry | Self::BanditModes => total > 0.0,
            Self::RotationQuarters => total >= rotator::SUCCESS_QUARTERS as f64,
        }
    }
}

/// Relabels rewards and the success flag; applying it twice changes nothing.
pub fn label_rewards(mut episode: Episode, rule: RewardRule) -> Episode {
    episode.rewards = rule.rewards(&episode);
    episode.success = rule.success(&episode.rewards);
    episode
}
