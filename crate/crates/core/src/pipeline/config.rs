use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::CriticConfig;
use crate::data::ChunkDims;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::optim::AdamWConfig;

/// Order in which stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePlan {
    /// Imitation, critic warm-up, offline RL, online RL.
    Standard,
    /// Teacher distillation, critic warm-up, online RL.
    Distill,
}

/// Optimization settings of one gradient-based stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Policy dropout while this stage trains.
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Replay capacity for collected transitions.
    pub buffer_capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub teacher_prob: f64,
    /// Multiplier applied to the teacher probability after every iteration.
    pub teacher_decay: f64,
}

/// Every knob of a training run. Defaults follow the reference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub plan: StagePlan,
    pub chunk_len: usize,
    pub prefix_len: usize,
    /// Decision stride for imitation data.
    pub il_stride: usize,
    /// Decision stride for RL rows; `None` uses `chunk_len`.
    pub rl_stride: Option<usize>,
    pub flow_depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub sigma_noise: f64,
    pub sigma_sample: f64,
    pub critic: CriticConfig,
    /// Explicit `[v_min, v_max]` of the value support; otherwise derived
    /// from dataset returns widened by `value_margin`.
    pub value_range: Option<[f64; 2]>,
    pub value_margin: f64,
    pub lambda_bc: f64,
    pub gamma: f64,
    pub tau: f64,
    pub rho: f64,
    /// Candidates per decision during online collection.
    pub n_pi: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Loss values are averaged over windows of this many steps in reports.
    pub log_every: usize,
    /// Episodes per evaluation pass recorded after each stage; 0 disables.
    pub eval_episodes: usize,
    pub il: PhaseConfig,
    pub warmup: PhaseConfig,
    pub offline: PhaseConfig,
    pub online: OnlineConfig,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plan: StagePlan::Standard,
            chunk_len: 10,
            prefix_len: 3,
            il_stride: 1,
            rl_stride: None,
            flow_depth: 16,
            hidden: 256,
            heads: 8,
            ffn_mult: 4,
            sigma_noise: 0.05,
            sigma_sample: 0.7,
            critic: CriticConfig::default(),
            value_range: None,
            value_margin: 0.1,
            lambda_bc: 0.1,
            gamma: 0.997,
            tau: 0.05,
            rho: 0.5,
            n_pi: 24,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            log_every: 100,
            eval_episodes: 20,
            il: PhaseConfig {
                steps: 30_000,
                batch_size: 256,
                lr: 1e-4,
                dropout: 0.5,
            },
            warmup: PhaseConfig {
                steps: 5_000,
                batch_size: 48,
                lr: 2e-4,
                dropout: 0.1,
            },
            offline: PhaseConfig {
                steps: 1_000,
                batch_size: 48,
                lr: 2e-4,
                dropout: 0.1,
            },
            online: OnlineConfig {
                iterations: 5,
                episodes_per_iteration: 10,
                steps_per_iteration: 500,
                batch_size: 48,
                lr: 2e-4,
                dropout: 0.1,
                buffer_capacity: 1_000_000,
            },
            distill: DistillConfig {
                iterations: 200,
                episodes_per_iteration: 8,
                steps_per_iteration: 100,
                batch_size: 256,
                lr: 1e-4,
                dropout: 0.5,
                teacher_prob: 1.0,
                teacher_decay: 0.999,
            },
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn check_phase(name: &str, p: &PhaseConfig) -> Result<()> {
    positive(&format!("{name}.batch_size"), p.batch_size)?;
    if !(p.lr > 0.0 && p.lr.is_finite()) {
        return Err(Error::Config(format!("{name}.lr must be positive")));
    }
    if !(0.0..1.0).contains(&p.dropout) {
        return Err(Error::Config(format!("{name}.dropout must lie in [0, 1)")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("chunk_len", self.chunk_len)?;
        positive("il_stride", self.il_stride)?;
        positive("rl_stride", self.rl_stride())?;
        positive("n_pi", self.n_pi)?;
        positive("log_every", self.log_every)?;
        if self.prefix_len > self.chunk_len {
            return Err(Error::Config("prefix_len must not exceed chunk_len".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.lambda_bc < 0.0 || self.weight_decay < 0.0 || self.value_margin < 0.0 {
            return Err(Error::Config(
                "lambda_bc, weight_decay and value_margin must be non-negative".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if let Some([lo, hi]) = self.value_range {
            if !(lo < hi) {
                return Err(Error::Config("value_range must satisfy lo < hi".into()));
            }
        }
        check_phase("il", &self.il)?;
        check_phase("warmup", &self.warmup)?;
        check_phase("offline", &self.offline)?;
        let o = &self.online;
        check_phase(
            "online",
            &PhaseConfig {
                steps: o.steps_per_iteration,
                batch_size: o.batch_size,
                lr: o.lr,
                dropout: o.dropout,
            },
        )?;
        positive("online.buffer_capacity", o.buffer_capacity)?;
        let d = &self.distill;
        check_phase(
            "distill",
            &PhaseConfig {
                steps: d.steps_per_iteration,
                batch_size: d.batch_size,
                lr: d.lr,
                dropout: d.dropout,
            },
        )?;
        if !(0.0..=1.0).contains(&d.teacher_prob) || !(0.0..=1.0).contains(&d.teacher_decay) {
            return Err(Error::Config(
                "distill teacher_prob and teacher_decay must lie in [0, 1]".into(),
            ));
        }
        self.critic.validate()?;
        self.flow_config(1, 1).validate()
    }

    pub fn rl_stride(&self) -> usize {
        self.rl_stride.unwrap_or(self.chunk_len)
    }

    pub fn flow_config(&self, obs_dim: usize, action_dim: usize) -> FlowConfig {
        FlowConfig {
            obs_dim,
            action_dim,
            chunk_len: self.chunk_len,
            prefix_len: self.prefix_len,
            depth: self.flow_depth,
            hidden: self.hidden,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            noise_std: self.sigma_noise,
            sample_std: self.sigma_sample,
        }
    }

    pub fn dims(&self, obs_dim: usize, action_dim: usize) -> ChunkDims {
        ChunkDims {
            obs_dim,
            action_dim,
            chunk_len: self.chunk_len,
            prefix_len: self.prefix_len,
        }
    }

    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            max_grad_norm: Some(self.grad_clip),
            ..AdamWConfig::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), c.clone().hash());
        let mut d = c.clone();
        d.lambda_bc = 0.3;
        assert_ne!(c.hash(), d.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = TrainConfig {
            rho: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig {
            prefix_len: 11,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
