use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{PhaseConfig, TrainConfig};
use super::{CurveLog, EvalRecord, Stage, StageReport};
use crate::critic::{CriticEnsemble, ValueSupport};
use crate::data::{
    extract_chunks, label_rewards, ChunkDims, Episode, MixedSampler, NormStats, ReplayBuffer,
    Source, TransitionBatch, TransitionChunk,
};
use crate::envs::{episode_seed, evaluate, rollout, Actor, ChunkEnv, EvalMetrics};
use crate::error::{Error, Result};
use crate::flow::{FlowPolicy, IlBatch};
use crate::graph::Graph;
use crate::nn::{Bind, Mode};
use crate::optim::AdamW;
use crate::policy::{ChunkSampler, ImitationModel};
use crate::scalar::{lit, to_f64, Scalar};
use crate::selector::{PolicyActor, SelectionConfig};
use crate::tensor::Tensor;

/// Independent random stream of one stage of a seeded run.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(episode_seed(seed, 1 << 20 | stage.code() as usize))
}

fn child_rng(rng: &mut impl Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.gen())
}

pub fn build_policy<T: Scalar>(
    cfg: &TrainConfig,
    obs_dim: usize,
    action_dim: usize,
) -> Result<FlowPolicy<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 1 << 21));
    FlowPolicy::new(cfg.flow_config(obs_dim, action_dim), &mut rng)
}

pub fn build_critic<T: Scalar>(
    cfg: &TrainConfig,
    dims: ChunkDims,
    support: &ValueSupport,
) -> Result<CriticEnsemble<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 1 << 22));
    CriticEnsemble::new(cfg.critic.clone(), dims, support.clone(), &mut rng)
}

/// Support covering the discounted returns-to-go of `episodes` (plus 0),
/// widened by the configured margin, unless an explicit range is set.
pub fn value_support(cfg: &TrainConfig, episodes: &[Episode]) -> Result<ValueSupport> {
    if let Some([lo, hi]) = cfg.value_range {
        return ValueSupport::new(lo, hi, cfg.critic.num_bins);
    }
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for e in episodes {
        let mut g = 0.0;
        for &r in e.rewards.iter().rev() {
            g = r + cfg.gamma * g;
            lo = lo.min(g);
            hi = hi.max(g);
        }
    }
    ValueSupport::from_range(lo, hi, cfg.value_margin, cfg.critic.num_bins)
}

/// Imitation rows from successful episodes at the imitation stride.
pub fn il_chunks(
    cfg: &TrainConfig,
    episodes: &[Episode],
    norm: &NormStats,
) -> Result<Vec<TransitionChunk>> {
    let mut out = Vec::new();
    for e in episodes.iter().filter(|e| e.success) {
        out.extend(extract_chunks(
            e,
            cfg.chunk_len,
            cfg.prefix_len,
            cfg.il_stride,
            norm,
        )?);
    }
    Ok(out)
}

/// RL rows from all episodes at the configured RL stride.
pub fn rl_chunks(
    cfg: &TrainConfig,
    episodes: &[Episode],
    norm: &NormStats,
) -> Result<Vec<TransitionChunk>> {
    let mut out = Vec::new();
    for e in episodes {
        out.extend(extract_chunks(
            e,
            cfg.chunk_len,
            cfg.prefix_len,
            cfg.rl_stride(),
            norm,
        )?);
    }
    Ok(out)
}

pub fn offline_buffer(
    cfg: &TrainConfig,
    episodes: &[Episode],
    norm: &NormStats,
) -> Result<ReplayBuffer> {
    let dims = cfg.dims(norm.obs_dim(), norm.action_dim());
    ReplayBuffer::from_rows(dims, rl_chunks(cfg, episodes, norm)?)
}

fn il_batch<T: Scalar>(b: &TransitionBatch<T>) -> IlBatch<T> {
    IlBatch {
        obs: b.obs.clone(),
        prefix: b.prefix.clone(),
        targets: b.chunks.clone(),
    }
}

#[allow(clippy::too_many_arguments)]
fn imitation_steps<T: Scalar, M: ImitationModel<T>>(
    model: &mut M,
    rows: &[TransitionChunk],
    dims: ChunkDims,
    phase: &PhaseConfig,
    steps: usize,
    noise: f64,
    opt: &mut AdamW<T>,
    rng: &mut ChaCha8Rng,
    log: &mut CurveLog,
) -> Result<()> {
    for _ in 0..steps {
        let picked: Vec<&TransitionChunk> = (0..phase.batch_size)
            .map(|_| &rows[rng.gen_range(0..rows.len())])
            .collect();
        let b = TransitionBatch::<T>::from_rows(&picked, dims)?;
        let mut drop_rng = child_rng(rng);
        let (loss, grads) = model.il_loss_and_grad(
            &il_batch(&b),
            noise,
            rng,
            Mode::train(phase.dropout, &mut drop_rng),
        )?;
        opt.step(model.params_mut(), grads);
        log.push("il_loss", to_f64(loss));
    }
    Ok(())
}

/// Stage I: maximum likelihood on successful demonstrations.
pub fn stage_il<T: Scalar, M: ImitationModel<T>>(
    cfg: &TrainConfig,
    model: &mut M,
    demos: &[Episode],
    norm: &NormStats,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    let start = Instant::now();
    let rows = il_chunks(cfg, demos, norm)?;
    if rows.is_empty() {
        return Err(Error::Argument(
            "imitation needs at least one successful demonstration".into(),
        ));
    }
    let dims = cfg.dims(norm.obs_dim(), norm.action_dim());
    let mut opt = AdamW::new(cfg.optimizer(cfg.il.lr), model.params());
    let mut log = CurveLog::new(cfg.log_every);
    imitation_steps(
        model,
        &rows,
        dims,
        &cfg.il,
        cfg.il.steps,
        cfg.sigma_noise,
        &mut opt,
        rng,
        &mut log,
    )?;
    Ok(report(cfg, Stage::Il, cfg.il.steps, log, start))
}

fn report(
    cfg: &TrainConfig,
    stage: Stage,
    steps: usize,
    log: CurveLog,
    start: Instant,
) -> StageReport {
    StageReport {
        stage,
        config_hash: cfg.hash(),
        steps,
        curves: log.finish(),
        eval: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// One critic update on `batch` bootstrapped through `policy`; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn critic_step<T: Scalar>(
    cfg: &TrainConfig,
    policy: &dyn ChunkSampler<T>,
    critic: &mut CriticEnsemble<T>,
    opt: &mut AdamW<T>,
    batch: &TransitionBatch<T>,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let y = critic.td_targets(batch, policy, cfg.gamma, cfg.sigma_sample, rng)?;
    let mut drop_rng = child_rng(rng);
    let (loss, grads) = critic.loss_and_grad(batch, &y, Mode::train(dropout, &mut drop_rng))?;
    opt.step(critic.params_mut(), grads);
    critic.polyak_update(cfg.tau)?;
    Ok(to_f64(loss))
}

/// Actor objective `-mean min_j Q_j(o, a_pi) + lambda * il_loss` and its
/// gradient with respect to the policy parameters.
///
/// `latents` drive the pathwise samples `a_pi`; the imitation term uses the
/// rows of `batch` flagged offline (skipped when there are none).
#[allow(clippy::too_many_arguments)]
pub fn actor_objective_and_grad<T: Scalar>(
    policy: &FlowPolicy<T>,
    critic: &CriticEnsemble<T>,
    batch: &TransitionBatch<T>,
    latents: &Tensor<T>,
    lambda: f64,
    noise_std: f64,
    rng: &mut dyn RngCore,
    mut mode: Mode<'_>,
) -> Result<(f64, f64, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::Argument("actor objective on an empty batch".into()));
    }
    let mut g = Graph::new();
    let p = Bind::trainable(policy.params());
    let ctx = policy.context_graph(&mut g, p, &batch.obs, &batch.prefix)?;
    let z = g.constant(latents.clone());
    let (a, _) = policy.inverse_graph(&mut g, p, z, &ctx, &mut mode);
    let q = critic.min_q_graph(
        &mut g,
        Bind::frozen(critic.params()),
        &batch.obs,
        &batch.prefix,
        a,
        &mut Mode::Eval,
    )?;
    let q_mean = g.mean_all(q);
    let q_value = to_f64(g.scalar_value(q_mean));
    let mut loss = g.neg(q_mean);
    let mut il_value = 0.0;
    let offline = batch.select(&batch.offline);
    if lambda > 0.0 && !offline.is_empty() {
        let il = policy.il_loss_graph(&mut g, p, &il_batch(&offline), noise_std, rng, &mut mode)?;
        il_value = to_f64(g.scalar_value(il));
        let il = g.scale(il, lit(lambda));
        loss = g.add(loss, il);
    }
    let grads = g.backward(loss);
    Ok((q_value, il_value, grads.for_store(policy.params())))
}

#[allow(clippy::too_many_arguments)]
fn actor_step<T: Scalar>(
    cfg: &TrainConfig,
    policy: &mut FlowPolicy<T>,
    critic: &CriticEnsemble<T>,
    opt: &mut AdamW<T>,
    batch: &TransitionBatch<T>,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    log: &mut CurveLog,
) -> Result<()> {
    let z = policy.draw_latents(batch.len(), cfg.sigma_sample, rng);
    let mut drop_rng = child_rng(rng);
    let (q, il, grads) = actor_objective_and_grad(
        policy,
        critic,
        batch,
        &z,
        cfg.lambda_bc,
        cfg.sigma_noise,
        rng,
        Mode::train(dropout, &mut drop_rng),
    )?;
    opt.step(policy.params_mut(), grads);
    log.push("actor_q", q);
    log.push("actor_il", il);
    Ok(())
}

/// Stage II: fits the critic to the frozen policy's chunked Bellman targets.
pub fn stage_warmup<T: Scalar>(
    cfg: &TrainConfig,
    policy: &dyn ChunkSampler<T>,
    critic: &mut CriticEnsemble<T>,
    data: &ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    let start = Instant::now();
    if data.is_empty() {
        return Err(Error::Data(
            "critic warm-up needs a non-empty dataset".into(),
        ));
    }
    if !data
        .iter()
        .flat_map(|r| r.rewards.iter())
        .all(|r| r.is_finite())
    {
        return Err(Error::Data("dataset rewards must be finite".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer(cfg.warmup.lr), critic.params());
    let mut log = CurveLog::new(cfg.log_every);
    for _ in 0..cfg.warmup.steps {
        let b = data.sample::<T>(cfg.warmup.batch_size, rng)?;
        let loss = critic_step(cfg, policy, critic, &mut opt, &b, cfg.critic.dropout, rng)?;
        log.push("critic_loss", loss);
    }
    Ok(report(cfg, Stage::Warmup, cfg.warmup.steps, log, start))
}

/// Stage III: alternating critic and actor updates on the offline dataset.
pub fn stage_offline<T: Scalar>(
    cfg: &TrainConfig,
    policy: &mut FlowPolicy<T>,
    critic: &mut CriticEnsemble<T>,
    data: &ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    let start = Instant::now();
    let phase = &cfg.offline;
    let mut q_opt = AdamW::new(cfg.optimizer(phase.lr), critic.params());
    let mut pi_opt = AdamW::new(cfg.optimizer(phase.lr), policy.params());
    let mut log = CurveLog::new(cfg.log_every);
    for _ in 0..phase.steps {
        let b = data.sample::<T>(phase.batch_size, rng)?;
        let loss = critic_step(
            cfg,
            &*policy,
            critic,
            &mut q_opt,
            &b,
            cfg.critic.dropout,
            rng,
        )?;
        log.push("critic_loss", loss);
        actor_step(
            cfg,
            policy,
            critic,
            &mut pi_opt,
            &b,
            phase.dropout,
            rng,
            &mut log,
        )?;
    }
    Ok(report(cfg, Stage::Offline, phase.steps, log, start))
}

fn selection(cfg: &TrainConfig) -> SelectionConfig {
    SelectionConfig {
        n_samples: cfg.n_pi,
        sample_std: cfg.sigma_sample,
        use_critic: true,
    }
}

fn collect(
    env: &dyn ChunkEnv,
    actor: &mut dyn Actor,
    seeds: &[u64],
    source: Source,
) -> Result<Vec<Episode>> {
    let mut eps = rollout(env, seeds, actor, source)?;
    if let Some(rule) = env.reward_rule() {
        eps = eps.into_iter().map(|e| label_rewards(e, rule)).collect();
    }
    Ok(eps)
}

/// Stage IV: collect with best-of-N selection, then train on `rho`-mixed
/// batches; the imitation term only sees offline rows.
#[allow(clippy::too_many_arguments)]
pub fn stage_online<T: Scalar>(
    cfg: &TrainConfig,
    policy: &mut FlowPolicy<T>,
    critic: &mut CriticEnsemble<T>,
    offline: &ReplayBuffer,
    online: &mut ReplayBuffer,
    env: &dyn ChunkEnv,
    norm: &NormStats,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    let start = Instant::now();
    let oc = &cfg.online;
    let sampler = MixedSampler::new(cfg.rho)?;
    let mut q_opt = AdamW::new(cfg.optimizer(oc.lr), critic.params());
    let mut pi_opt = AdamW::new(cfg.optimizer(oc.lr), policy.params());
    let mut log = CurveLog::new(cfg.log_every);
    let mut episode_index = 0usize;
    for _ in 0..oc.iterations {
        let seeds: Vec<u64> = (0..oc.episodes_per_iteration)
            .map(|i| episode_seed(cfg.seed ^ 0x0511_11E5, episode_index + i))
            .collect();
        episode_index += seeds.len();
        let eps = {
            let mut actor = PolicyActor::new(
                &*policy,
                Some(&*critic),
                norm,
                selection(cfg),
                cfg.prefix_len,
                rng.gen(),
            )?;
            collect(env, &mut actor, &seeds, Source::Online)
                .map_err(|e| Error::Environment(format!("online collection failed: {e}")))?
        };
        let success = eps.iter().filter(|e| e.success).count() as f64 / eps.len().max(1) as f64;
        log.point("collect_success", success);
        for row in rl_chunks(cfg, &eps, norm)? {
            online.push(row)?;
        }
        for _ in 0..oc.steps_per_iteration {
            let b = sampler.sample::<T>(offline, online, oc.batch_size, rng)?;
            let frac = b.offline.iter().filter(|&&o| o).count() as f64 / b.len() as f64;
            log.push("offline_fraction", frac);
            let loss = critic_step(
                cfg,
                &*policy,
                critic,
                &mut q_opt,
                &b,
                cfg.critic.dropout,
                rng,
            )?;
            log.push("critic_loss", loss);
            actor_step(
                cfg,
                policy,
                critic,
                &mut pi_opt,
                &b,
                oc.dropout,
                rng,
                &mut log,
            )?;
        }
    }
    Ok(report(
        cfg,
        Stage::Online,
        oc.iterations * oc.steps_per_iteration,
        log,
        start,
    ))
}

/// Executes the teacher's chunk with probability `p`, the student's
/// otherwise, and records the teacher's chunk as the label either way.
struct Mixer<'a, 'b, T: Scalar> {
    teacher: &'a mut dyn Actor,
    student: Option<PolicyActor<'b, T>>,
    p: f64,
    rng: ChaCha8Rng,
    labels: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl<T: Scalar> Actor for Mixer<'_, '_, T> {
    fn chunk_len(&self) -> usize {
        self.teacher.chunk_len()
    }

    fn prefix_len(&self) -> usize {
        self.teacher.prefix_len()
    }

    fn act(&mut self, obs: &[Vec<f64>], prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let t = self.teacher.act(obs, prefix)?;
        let s = match &mut self.student {
            Some(st) if self.p < 1.0 => Some(st.act(obs, prefix)?),
            _ => None,
        };
        let mut out = Vec::with_capacity(obs.len());
        for i in 0..obs.len() {
            self.labels
                .push((obs[i].clone(), prefix[i].clone(), t[i].clone()));
            let use_teacher = s.is_none() || self.rng.gen::<f64>() < self.p;
            out.push(match &s {
                Some(s) if !use_teacher => s[i].clone(),
                _ => t[i].clone(),
            });
        }
        Ok(out)
    }
}

fn label_rows(
    labels: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    norm: &NormStats,
    chunk_len: usize,
) -> Vec<TransitionChunk> {
    labels
        .iter()
        .map(|(o, p, c)| {
            let obs = norm.normalize_obs(o);
            let prefix = norm.normalize_actions(p);
            TransitionChunk {
                next_obs: obs.clone(),
                next_prefix: prefix.clone(),
                obs,
                prefix,
                chunk: norm.normalize_actions(c),
                rewards: vec![0.0; chunk_len],
                done: true,
                source: Source::Demo,
            }
        })
        .collect()
}

/// Result of teacher distillation: statistics fitted on teacher rollouts,
/// every collected episode (reward labelled) and the stage report.
pub struct DistillOutput {
    pub norm: NormStats,
    pub episodes: Vec<Episode>,
    pub report: StageReport,
}

/// Teacher-student distillation with a decaying teacher probability.
///
/// A teacher-only round fits the normalization statistics; every later
/// round executes the teacher's chunk with probability `p_teacher` and
/// trains the student on all teacher labels gathered so far.
pub fn stage_distill<T: Scalar>(
    cfg: &TrainConfig,
    policy: &mut FlowPolicy<T>,
    env: &dyn ChunkEnv,
    teacher: &mut dyn Actor,
    rng: &mut ChaCha8Rng,
) -> Result<DistillOutput> {
    let start = Instant::now();
    let dc = &cfg.distill;
    if teacher.chunk_len() != cfg.chunk_len || teacher.prefix_len() != cfg.prefix_len {
        return Err(Error::Config(
            "teacher chunk layout differs from the run's".into(),
        ));
    }
    let n_eps = dc.episodes_per_iteration.max(1);
    let mut episode_index = 0usize;
    let mut next_seeds = |k: usize| -> Vec<u64> {
        let s = (0..k)
            .map(|i| episode_seed(cfg.seed ^ 0xD157_1111, episode_index + i))
            .collect();
        episode_index += k;
        s
    };
    let mut mixer = Mixer::<T> {
        teacher: &mut *teacher,
        student: None,
        p: 1.0,
        rng: child_rng(rng),
        labels: Vec::new(),
    };
    let mut episodes = collect(env, &mut mixer, &next_seeds(n_eps), Source::OfflineExtra)?;
    let mut labels = std::mem::take(&mut mixer.labels);
    let norm = NormStats::fit(&episodes)?;
    let dims = cfg.dims(norm.obs_dim(), norm.action_dim());
    let phase = PhaseConfig {
        steps: dc.steps_per_iteration,
        batch_size: dc.batch_size,
        lr: dc.lr,
        dropout: dc.dropout,
    };
    let mut opt = AdamW::new(cfg.optimizer(dc.lr), policy.params());
    let mut log = CurveLog::new(cfg.log_every);
    let mut p = dc.teacher_prob;
    let mut rows = label_rows(&labels, &norm, cfg.chunk_len);
    for it in 0..dc.iterations {
        if it > 0 {
            let student = PolicyActor::new(
                &*policy,
                None,
                &norm,
                SelectionConfig::plain(cfg.sigma_sample),
                cfg.prefix_len,
                rng.gen(),
            )?;
            let mut mixer = Mixer {
                teacher: &mut *teacher,
                student: Some(student),
                p,
                rng: child_rng(rng),
                labels: Vec::new(),
            };
            let eps = collect(env, &mut mixer, &next_seeds(n_eps), Source::OfflineExtra)?;
            let fresh = std::mem::take(&mut mixer.labels);
            drop(mixer);
            let success = eps.iter().filter(|e| e.success).count() as f64 / eps.len().max(1) as f64;
            log.point("collect_success", success);
            rows.extend(label_rows(&fresh, &norm, cfg.chunk_len));
            labels.extend(fresh);
            episodes.extend(eps);
        }
        log.point("teacher_prob", p);
        imitation_steps(
            policy,
            &rows,
            dims,
            &phase,
            phase.steps,
            cfg.sigma_noise,
            &mut opt,
            rng,
            &mut log,
        )?;
        p *= dc.teacher_decay;
    }
    let report = report(
        cfg,
        Stage::Distill,
        dc.iterations * dc.steps_per_iteration,
        log,
        start,
    );
    Ok(DistillOutput {
        norm,
        episodes,
        report,
    })
}

/// Seeded evaluation of a learned policy with the given selection rule.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy<T: Scalar>(
    policy: &dyn ChunkSampler<T>,
    critic: Option<&CriticEnsemble<T>>,
    norm: &NormStats,
    prefix_len: usize,
    env: &dyn ChunkEnv,
    episodes: usize,
    selection: &SelectionConfig,
    seed: u64,
) -> Result<EvalMetrics> {
    let mut actor = PolicyActor::new(policy, critic, norm, selection.clone(), prefix_len, seed)?;
    evaluate(&mut actor, env, episodes, seed, 50)
}

/// Plain sampling and, when a critic is present, best-of-`n_pi` selection,
/// each over the same `episodes` seeded episodes.
pub fn eval_records<T: Scalar>(
    cfg: &TrainConfig,
    policy: &FlowPolicy<T>,
    critic: Option<&CriticEnsemble<T>>,
    norm: &NormStats,
    env: &dyn ChunkEnv,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let mut sels = vec![SelectionConfig::plain(cfg.sigma_sample)];
    if critic.is_some() {
        sels.push(selection(cfg));
    }
    sels.iter()
        .map(|s| {
            let metrics =
                evaluate_policy(policy, critic, norm, cfg.prefix_len, env, episodes, s, seed)?;
            Ok(EvalRecord {
                n_samples: s.n_samples,
                use_critic: s.use_critic,
                metrics,
            })
        })
        .collect()
}

/// Seed of the evaluation pass recorded after each stage.
pub fn report_eval_seed(cfg: &TrainConfig) -> u64 {
    episode_seed(cfg.seed, 1 << 23)
}
