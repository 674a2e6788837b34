//! Staged training: imitation, critic warm-up, offline RL, online RL and
//! teacher distillation, with persisted checkpoints and JSONL stage reports.

mod checkpoint;
mod config;
mod run;
mod stages;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::TrainState;
pub use config::{DistillConfig, OnlineConfig, PhaseConfig, StagePlan, TrainConfig};
pub use run::{read_checkpoint, Inputs, RunDir, Runner};
pub use stages::{
    actor_objective_and_grad, build_critic, build_policy, critic_step, eval_records,
    evaluate_policy, il_chunks, offline_buffer, report_eval_seed, rl_chunks, stage_distill,
    stage_il, stage_offline, stage_online, stage_rng, stage_warmup, value_support, DistillOutput,
};

use crate::envs::EvalMetrics;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Il,
    Warmup,
    Offline,
    Online,
    Distill,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Il,
        Stage::Warmup,
        Stage::Offline,
        Stage::Online,
        Stage::Distill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Il => "il",
            Stage::Warmup => "warmup",
            Stage::Offline => "offline",
            Stage::Online => "online",
            Stage::Distill => "distill",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("invalid stage code {c}")))
    }

    /// Stages of `plan` in execution order.
    pub fn sequence(plan: StagePlan) -> &'static [Stage] {
        match plan {
            StagePlan::Standard => &[Stage::Il, Stage::Warmup, Stage::Offline, Stage::Online],
            StagePlan::Distill => &[Stage::Distill, Stage::Warmup, Stage::Online],
        }
    }

    /// The stage whose checkpoint this one starts from under `plan`.
    pub fn prerequisite(self, plan: StagePlan) -> Result<Option<Stage>> {
        let seq = Self::sequence(plan);
        match seq.iter().position(|&s| s == self) {
            Some(0) => Ok(None),
            Some(i) => Ok(Some(seq[i - 1])),
            None => Err(Error::Config(format!(
                "stage '{}' is not part of the {plan:?} plan",
                self.name()
            ))),
        }
    }
}

/// One evaluation pass recorded in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub n_samples: usize,
    pub use_critic: bool,
    pub metrics: EvalMetrics,
}

/// Summary of one stage, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub config_hash: String,
    pub steps: usize,
    /// Window-averaged curves keyed by quantity.
    pub curves: BTreeMap<String, Vec<f64>>,
    pub eval: Vec<EvalRecord>,
    pub wall_time_s: f64,
}

impl StageReport {
    pub fn append_to(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(self).expect("report serializes");
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Last value of a curve.
    pub fn last(&self, key: &str) -> Option<f64> {
        self.curves.get(key).and_then(|c| c.last().copied())
    }
}

/// Accumulates per-step values into window means.
#[derive(Clone, Debug, Default)]
pub(crate) struct CurveLog {
    window: usize,
    open: BTreeMap<String, (f64, usize)>,
    curves: BTreeMap<String, Vec<f64>>,
}

impl CurveLog {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            ..Self::default()
        }
    }

    pub fn push(&mut self, key: &str, v: f64) {
        let e = self.open.entry(key.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
        if e.1 == self.window {
            self.curves
                .entry(key.to_string())
                .or_default()
                .push(e.0 / e.1 as f64);
            *e = (0.0, 0);
        }
    }

    /// Records a value directly as one curve point.
    pub fn point(&mut self, key: &str, v: f64) {
        self.curves.entry(key.to_string()).or_default().push(v);
    }

    pub fn finish(mut self) -> BTreeMap<String, Vec<f64>> {
        for (k, (s, n)) in std::mem::take(&mut self.open) {
            if n > 0 {
                self.curves.entry(k).or_default().push(s / n as f64);
            }
        }
        self.curves
    }
}
