use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bandit, pointmass, rotator, ChunkEnv};
use crate::data::{label_rewards, Episode, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Produces raw action chunks for a batch of decision points.
pub trait Actor {
    fn chunk_len(&self) -> usize;
    fn prefix_len(&self) -> usize;

    /// `obs[i]` is a raw observation and `prefix[i]` the `P * A` raw actions
    /// already committed after it; returns `H * A` raw actions per row.
    fn act(&mut self, obs: &[Vec<f64>], prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Seed of episode `i` in a run seeded with `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i as u64)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Live {
    env: Box<dyn ChunkEnv>,
    obs: Vec<f64>,
    queue: VecDeque<Vec<f64>>,
    observations: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    done: bool,
}

/// Runs one episode per seed in lockstep with the real-time chunk protocol.
///
/// Each episode starts with `P` zero actions queued. At every decision point
/// the actor sees the current observation and the queued prefix, its chunk is
/// appended to the queue, and the next `H` queued actions execute.
pub fn rollout(
    env: &dyn ChunkEnv,
    seeds: &[u64],
    actor: &mut dyn Actor,
    source: Source,
) -> Result<Vec<Episode>> {
    let (h, p) = (actor.chunk_len(), actor.prefix_len());
    if h == 0 || p > h {
        return Err(Error::Argument(format!(
            "invalid chunk layout: H = {h}, P = {p}"
        )));
    }
    let a_dim = env.action_dim();
    let mut live: Vec<Live> = seeds
        .iter()
        .map(|&s| {
            let mut e = env.boxed_clone();
            let obs = e.reset(s);
            Live {
                env: e,
                obs,
                queue: (0..p).map(|_| vec![0.0; a_dim]).collect(),
                observations: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                done: false,
            }
        })
        .collect();
    while live.iter().any(|l| !l.done) {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
        let obs: Vec<Vec<f64>> = active.iter().map(|&i| live[i].obs.clone()).collect();
        let prefix: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| live[i].queue.iter().flatten().copied().collect())
            .collect();
        let chunks = actor.act(&obs, &prefix)?;
        if chunks.len() != active.len() {
            return Err(Error::Shape(
                "actor returned the wrong number of chunks".into(),
            ));
        }
        for (&i, chunk) in active.iter().zip(chunks) {
            if chunk.len() != h * a_dim {
                return Err(Error::Shape(format!(
                    "actor chunk has {} values, expected {}",
                    chunk.len(),
                    h * a_dim
                )));
            }
            let l = &mut live[i];
            l.queue.extend(chunk.chunks(a_dim).map(|c| c.to_vec()));
            for _ in 0..h {
                let a = l.queue.pop_front().expect("queue holds at least H actions");
                let s = l.env.step(&a);
                if s.obs.iter().any(|x| !x.is_finite()) || !s.reward.is_finite() {
                    return Err(Error::Environment(format!(
                        "{} produced a non-finite step",
                        l.env.name()
                    )));
                }
                l.observations.extend(&l.obs);
                l.actions.extend(&a);
                l.rewards.push(s.reward);
                l.obs = s.obs;
                if s.done {
                    l.done = true;
                    break;
                }
            }
        }
    }
    live.into_iter()
        .map(|l| {
            let t = l.rewards.len();
            Episode::new(
                Tensor::from_vec(t, env.obs_dim(), l.observations)?,
                Tensor::from_vec(t, a_dim, l.actions)?,
                l.rewards,
                l.env.success(),
                source,
            )
        })
        .collect()
}

/// Per-run evaluation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    /// Rotations per minute on the rotator task.
    pub rpm: Option<f64>,
}

/// Runs `episodes` seeded episodes, `batch` at a time.
pub fn evaluate(
    actor: &mut dyn Actor,
    env: &dyn ChunkEnv,
    episodes: usize,
    seed: u64,
    batch: usize,
) -> Result<EvalMetrics> {
    if episodes == 0 {
        return Err(Error::Argument(
            "evaluation needs at least one episode".into(),
        ));
    }
    let seeds: Vec<u64> = (0..episodes).map(|i| episode_seed(seed, i)).collect();
    let mut eps = Vec::with_capacity(episodes);
    for part in seeds.chunks(batch.max(1)) {
        eps.extend(rollout(env, part, actor, Source::Online)?);
    }
    Ok(summarize(env, &eps))
}

pub fn summarize(env: &dyn ChunkEnv, eps: &[Episode]) -> EvalMetrics {
    let n = eps.len().max(1) as f64;
    let rpm = (env.name() == "rotator").then(|| {
        eps.iter()
            .map(|e| {
                let minutes = e.len().max(1) as f64 * rotator::DT / 60.0;
                e.total_reward() / 4.0 / minutes
            })
            .sum::<f64>()
            / n
    });
    EvalMetrics {
        episodes: eps.len(),
        success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
        mean_return: eps.iter().map(Episode::total_reward).sum::<f64>() / n,
        mean_length: eps.iter().map(|e| e.len() as f64).sum::<f64>() / n,
        rpm,
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

pub fn aggregate(values: &[f64]) -> SeedSummary {
    let n = values.len();
    let mean = if n == 0 {
        0.0
    } else {
        values.iter().sum::<f64>() / n as f64
    };
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    SeedSummary {
        mean,
        std,
        values: values.to_vec(),
    }
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Scripted demonstrations with an exact failure count.
///
/// Episodes are drawn from `behavior` and kept until `n - round(n * fail_frac)`
/// successes and `round(n * fail_frac)` failures are collected; rewards and
/// success flags come from the task's reward rule.
pub fn gen_demos(
    env: &dyn ChunkEnv,
    behavior: &mut dyn Actor,
    n: usize,
    fail_frac: f64,
    seed: u64,
) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::Argument(
            "number of demonstrations must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fail_frac) {
        return Err(Error::Argument(format!(
            "failure fraction must lie in [0, 1], got {fail_frac}"
        )));
    }
    let want_fail = (n as f64 * fail_frac).round() as usize;
    let want_ok = n - want_fail;
    let (mut ok, mut fail) = (0, 0);
    let mut out = Vec::with_capacity(n);
    let mut next = 0usize;
    let max_attempts = 1000 * n;
    while ok < want_ok || fail < want_fail {
        if next >= max_attempts {
            return Err(Error::Data(format!(
                "behavior produced {ok} successes and {fail} failures in {next} attempts"
            )));
        }
        let seeds: Vec<u64> = (next..next + 16).map(|i| episode_seed(seed, i)).collect();
        next += seeds.len();
        for mut e in rollout(env, &seeds, behavior, Source::Demo)? {
            if let Some(rule) = env.reward_rule() {
                e = label_rewards(e, rule);
            }
            if e.success && ok < want_ok {
                ok += 1;
                out.push(e);
            } else if !e.success && fail < want_fail {
                fail += 1;
                out.push(e);
            }
        }
    }
    Ok(out)
}

/// Uniform random commands in `[-1, 1]^A`.
pub struct RandomActor {
    pub chunk_len: usize,
    pub prefix_len: usize,
    pub action_dim: usize,
    pub rng: ChaCha8Rng,
}

impl Actor for RandomActor {
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    fn act(&mut self, obs: &[Vec<f64>], _prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.chunk_len * self.action_dim;
        Ok(obs
            .iter()
            .map(|_| (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect())
            .collect())
    }
}

/// Two-mode bandit demonstrator: a mode picked uniformly plus Gaussian
/// jitter, or with probability `fail_prob` a uniform action outside both modes.
pub struct BanditDemo {
    pub jitter: f64,
    pub fail_prob: f64,
    pub rng: ChaCha8Rng,
}

impl BanditDemo {
    pub fn new(seed: u64) -> Self {
        Self {
            jitter: 0.04,
            fail_prob: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Actor for BanditDemo {
    fn chunk_len(&self) -> usize {
        1
    }

    fn prefix_len(&self) -> usize {
        0
    }

    fn act(&mut self, obs: &[Vec<f64>], _prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let noise = Normal::new(0.0, self.jitter).map_err(|e| Error::Config(e.to_string()))?;
        Ok(obs
            .iter()
            .map(|_| {
                if self.rng.gen::<f64>() < self.fail_prob {
                    loop {
                        let a = vec![self.rng.gen_range(-1.0..1.0), self.rng.gen_range(-1.0..1.0)];
                        if !bandit::in_mode(&a) {
                            return a;
                        }
                    }
                }
                let m = bandit::MODES[usize::from(self.rng.gen::<bool>())];
                vec![
                    (m[0] + noise.sample(&mut self.rng)).clamp(-1.0, 1.0),
                    (m[1] + noise.sample(&mut self.rng)).clamp(-1.0, 1.0),
                ]
            })
            .collect())
    }
}

/// Point-mass demonstrator. Each chunk is either a noisy proportional
/// controller toward the goal (planned from the position the prefix will
/// reach) or, with probability `wander_prob`, a constant command in a random
/// direction.
pub struct PointMassTeacher {
    pub chunk_len: usize,
    pub prefix_len: usize,
    pub gain: f64,
    pub noise: f64,
    pub wander_prob: f64,
    pub rng: ChaCha8Rng,
}

impl PointMassTeacher {
    pub fn new(chunk_len: usize, prefix_len: usize, wander_prob: f64, seed: u64) -> Self {
        Self {
            chunk_len,
            prefix_len,
            gain: 5.0,
            noise: 0.1,
            wander_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Actor for PointMassTeacher {
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    fn act(&mut self, obs: &[Vec<f64>], prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let noise =
            Normal::new(0.0, self.noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(obs.len());
        for (o, pre) in obs.iter().zip(prefix) {
            let goal = [o[2], o[3]];
            let mut pos = [o[0], o[1]];
            for a in pre.chunks(2) {
                pos = pointmass::advance(pos, a);
            }
            let mut chunk = Vec::with_capacity(2 * self.chunk_len);
            if self.rng.gen::<f64>() < self.wander_prob {
                let th = self.rng.gen_range(0.0..std::f64::consts::TAU);
                let mag = self.rng.gen_range(0.6..1.0);
                for _ in 0..self.chunk_len {
                    chunk.push((mag * th.cos() + noise.sample(&mut self.rng)).clamp(-1.0, 1.0));
                    chunk.push((mag * th.sin() + noise.sample(&mut self.rng)).clamp(-1.0, 1.0));
                }
            } else {
                for _ in 0..self.chunk_len {
                    let a = [
                        (self.gain * (goal[0] - pos[0]) + noise.sample(&mut self.rng))
                            .clamp(-1.0, 1.0),
                        (self.gain * (goal[1] - pos[1]) + noise.sample(&mut self.rng))
                            .clamp(-1.0, 1.0),
                    ];
                    pos = pointmass::advance(pos, &a);
                    chunk.extend(a);
                }
            }
            out.push(chunk);
        }
        Ok(out)
    }
}

/// Rotator demonstrator: a noisy constant command.
pub struct RotatorTeacher {
    pub chunk_len: usize,
    pub prefix_len: usize,
    pub command: f64,
    pub noise: f64,
    pub rng: ChaCha8Rng,
}

impl Actor for RotatorTeacher {
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    fn act(&mut self, obs: &[Vec<f64>], _prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let noise =
            Normal::new(0.0, self.noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(obs
            .iter()
            .map(|_| {
                (0..self.chunk_len)
                    .map(|_| (self.command + noise.sample(&mut self.rng)).clamp(-1.0, 1.0))
                    .collect()
            })
            .collect())
    }
}

/// Scripted demonstrator for a registered environment.
///
/// The bandit demonstrator always acts one step at a time and fails with
/// probability 0.3 so any failure fraction is reachable; the others follow
/// the requested chunk and prefix lengths.
pub fn make_demonstrator(
    env: &dyn ChunkEnv,
    name: &str,
    chunk_len: usize,
    prefix_len: usize,
    seed: u64,
) -> Result<Box<dyn Actor>> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "bandit" => Ok(Box::new(BanditDemo {
            fail_prob: 0.3,
            ..BanditDemo::new(seed)
        })),
        "pointmass" => Ok(Box::new(PointMassTeacher::new(
            chunk_len, prefix_len, 0.6, seed,
        ))),
        "rotator" => Ok(Box::new(RotatorTeacher {
            chunk_len,
            prefix_len,
            command: 0.6,
            noise: 0.2,
            rng,
        })),
        "tabular" => Ok(Box::new(RandomActor {
            chunk_len,
            prefix_len,
            action_dim: env.action_dim(),
            rng,
        })),
        _ => Err(Error::Config(format!(
            "no demonstrator for environment '{name}'"
        ))),
    }
}
