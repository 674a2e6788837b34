use std::path::{Path, PathBuf};

use super::checkpoint::TrainState;
use super::config::TrainConfig;
use super::stages::{
    build_critic, build_policy, eval_records, offline_buffer, report_eval_seed, stage_distill,
    stage_il, stage_offline, stage_online, stage_rng, stage_warmup, value_support,
};
use super::{Stage, StageReport};
use crate::data::{Episode, NormStats, ReplayBuffer};
use crate::envs::{Actor, ChunkEnv};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layout of a run directory.
///
/// ```text
/// <root>/checkpoints/<stage>.ckpt
/// <root>/buffers/offline.buf
/// <root>/buffers/online.buf
/// <root>/reports.jsonl
/// ```
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.ckpt", stage.name()))
    }

    pub fn offline_buffer(&self) -> PathBuf {
        self.root.join("buffers").join("offline.buf")
    }

    pub fn online_buffer(&self) -> PathBuf {
        self.root.join("buffers").join("online.buf")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports.jsonl")
    }
}

/// External inputs a stage may need.
#[derive(Default)]
pub struct Inputs<'a> {
    /// Demonstration corpus (imitation plan).
    pub demos: Option<&'a [Episode]>,
    /// Environment for online collection, distillation and evaluation.
    pub env: Option<&'a dyn ChunkEnv>,
    /// Scripted teacher for distillation.
    pub teacher: Option<&'a mut dyn Actor>,
}

/// Drives the stages of one run, persisting after every stage when a run
/// directory is attached.
pub struct Runner<T: Scalar> {
    cfg: TrainConfig,
    dir: Option<RunDir>,
    state: Option<TrainState<T>>,
    offline: Option<ReplayBuffer>,
    online: Option<ReplayBuffer>,
    reports: Vec<StageReport>,
}

fn require<'a, X: ?Sized>(x: Option<&'a X>, what: &str, stage: Stage) -> Result<&'a X> {
    x.ok_or_else(|| Error::Argument(format!("stage '{}' needs {what}", stage.name())))
}

impl<T: Scalar> Runner<T> {
    pub fn new(cfg: TrainConfig, dir: Option<RunDir>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dir,
            state: None,
            offline: None,
            online: None,
            reports: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> Option<&TrainState<T>> {
        self.state.as_ref()
    }

    pub fn into_state(self) -> Option<TrainState<T>> {
        self.state
    }

    pub fn reports(&self) -> &[StageReport] {
        &self.reports
    }

    pub fn offline_data(&self) -> Option<&ReplayBuffer> {
        self.offline.as_ref()
    }

    pub fn online_data(&self) -> Option<&ReplayBuffer> {
        self.online.as_ref()
    }

    /// Loads the persisted state after `stage`, checking the config hash.
    pub fn load_checkpoint(&mut self, stage: Stage) -> Result<()> {
        let dir = self.dir.as_ref().ok_or_else(|| {
            Error::Resume(format!(
                "no state after stage '{}' and no run directory",
                stage.name()
            ))
        })?;
        let path = dir.checkpoint(stage);
        if !path.exists() {
            return Err(Error::Resume(format!(
                "missing checkpoint {} (run stage '{}' first)",
                path.display(),
                stage.name()
            )));
        }
        let st = TrainState::<T>::load(&path)?;
        if st.config_hash() != self.cfg.hash() {
            return Err(Error::Resume(format!(
                "checkpoint {} was written with a different configuration",
                path.display()
            )));
        }
        let (offline, norm) = ReplayBuffer::load(&dir.offline_buffer())?;
        if norm != st.norm {
            return Err(Error::Resume(
                "offline buffer statistics differ from the checkpoint".into(),
            ));
        }
        self.offline = Some(offline);
        let online_path = dir.online_buffer();
        self.online = if stage == Stage::Online && online_path.exists() {
            Some(ReplayBuffer::load(&online_path)?.0)
        } else {
            None
        };
        self.state = Some(st);
        Ok(())
    }

    fn ensure_prerequisite(&mut self, stage: Stage) -> Result<()> {
        let Some(pre) = stage.prerequisite(self.cfg.plan)? else {
            return Ok(());
        };
        if self.state.as_ref().is_some_and(|s| s.stage == pre) {
            return Ok(());
        }
        self.load_checkpoint(pre)
    }

    fn persist(&self, report: &StageReport) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let st = self.state.as_ref().expect("state after a stage");
        if let Some(off) = &self.offline {
            off.save(&dir.offline_buffer(), &st.norm)?;
        }
        if let Some(on) = &self.online {
            on.save(&dir.online_buffer(), &st.norm)?;
        }
        st.save(&dir.checkpoint(report.stage))?;
        report.append_to(&dir.reports())
    }

    /// Runs one stage, loading its prerequisite checkpoint if needed.
    pub fn run_stage(&mut self, stage: Stage, inputs: &mut Inputs<'_>) -> Result<&StageReport> {
        self.ensure_prerequisite(stage)?;
        let cfg = self.cfg.clone();
        let mut rng = stage_rng(cfg.seed, stage);
        let mut report =
            match stage {
                Stage::Il => {
                    let demos = require(inputs.demos, "a demonstration corpus", stage)?;
                    let norm = NormStats::fit(demos)?;
                    let support = value_support(&cfg, demos)?;
                    let mut policy = build_policy::<T>(&cfg, norm.obs_dim(), norm.action_dim())?;
                    let report = stage_il(&cfg, &mut policy, demos, &norm, &mut rng)?;
                    self.offline = Some(offline_buffer(&cfg, demos, &norm)?);
                    self.online = None;
                    self.state = Some(TrainState {
                        config: cfg.clone(),
                        stage,
                        norm,
                        support,
                        policy,
                        critic: None,
                    });
                    report
                }
                Stage::Distill => {
                    let env = require(inputs.env, "an environment", stage)?;
                    let teacher = inputs.teacher.as_deref_mut().ok_or_else(|| {
                        Error::Argument("stage 'distill' needs a scripted teacher".into())
                    })?;
                    let obs_dim = env.obs_dim();
                    let mut policy = build_policy::<T>(&cfg, obs_dim, env.action_dim())?;
                    let out = stage_distill(&cfg, &mut policy, env, teacher, &mut rng)?;
                    let support = value_support(&cfg, &out.episodes)?;
                    self.offline = Some(offline_buffer(&cfg, &out.episodes, &out.norm)?);
                    self.online = None;
                    self.state = Some(TrainState {
                        config: cfg.clone(),
                        stage,
                        norm: out.norm,
                        support,
                        policy,
                        critic: None,
                    });
                    out.report
                }
                Stage::Warmup => {
                    let st = self.state.as_mut().expect("prerequisite loaded");
                    let offline = self.offline.as_ref().expect("offline data loaded");
                    let mut critic = build_critic::<T>(&cfg, offline.dims(), &st.support)?;
                    let report = stage_warmup(&cfg, &st.policy, &mut critic, offline, &mut rng)?;
                    st.critic = Some(critic);
                    st.stage = stage;
                    report
                }
                Stage::Offline => {
                    let st = self.state.as_mut().expect("prerequisite loaded");
                    let offline = self.offline.as_ref().expect("offline data loaded");
                    let critic = st.critic.as_mut().ok_or_else(|| {
                        Error::Resume("offline RL needs a warmed-up critic".into())
                    })?;
                    let report = stage_offline(&cfg, &mut st.policy, critic, offline, &mut rng)?;
                    st.stage = stage;
                    report
                }
                Stage::Online => {
                    let env = require(inputs.env, "an environment", stage)?;
                    let st = self.state.as_mut().expect("prerequisite loaded");
                    let offline = self.offline.as_ref().expect("offline data loaded");
                    let critic = st.critic.as_mut().ok_or_else(|| {
                        Error::Resume("online RL needs a warmed-up critic".into())
                    })?;
                    let mut online = ReplayBuffer::new(offline.dims(), cfg.online.buffer_capacity);
                    let report = stage_online(
                        &cfg,
                        &mut st.policy,
                        critic,
                        offline,
                        &mut online,
                        env,
                        &st.norm,
                        &mut rng,
                    )?;
                    self.online = Some(online);
                    st.stage = stage;
                    report
                }
            };
        if let (Some(env), true) = (inputs.env, cfg.eval_episodes > 0) {
            let st = self.state.as_ref().expect("state after a stage");
            let seed = report_eval_seed(&cfg);
            report.eval = eval_records(
                &cfg,
                &st.policy,
                st.critic.as_ref(),
                &st.norm,
                env,
                cfg.eval_episodes,
                seed,
            )?;
        }
        self.persist(&report)?;
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Runs every stage of the configured plan. With `resume`, stages whose
    /// checkpoint already exists (and matches the configuration) are loaded
    /// instead of rerun.
    pub fn run_all(&mut self, inputs: &mut Inputs<'_>, resume: bool) -> Result<()> {
        let seq = Stage::sequence(self.cfg.plan);
        let mut start = 0;
        if resume {
            if let Some(dir) = &self.dir {
                if let Some(i) = seq.iter().rposition(|&s| dir.checkpoint(s).exists()) {
                    self.load_checkpoint(seq[i])?;
                    start = i + 1;
                }
            }
        }
        for &stage in &seq[start..] {
            self.run_stage(stage, inputs)?;
        }
        Ok(())
    }
}

/// Reads a checkpoint, mapping a missing file to a resume error.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    if !path.exists() {
        return Err(Error::Resume(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    TrainState::load(path)
}
