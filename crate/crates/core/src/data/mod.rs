//! Episodes, chunked transitions, normalization, replay buffers and on-disk corpora.

mod buffer;
mod corpus;
mod norm;
mod rewards;

pub use buffer::{MixedSampler, ReplayBuffer};
pub use corpus::{read_corpus, read_episode, write_corpus, write_episode, Manifest, ManifestEntry};
pub use norm::{NormStats, ACTION_MARGIN};
pub use rewards::{label_rewards, RewardRule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::clip_action;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Where an episode or transition came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Demo,
    OfflineExtra,
    Online,
}

impl Source {
    pub fn code(self) -> u8 {
        match self {
            Source::Demo => 0,
            Source::OfflineExtra => 1,
            Source::Online => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Source::Demo),
            1 => Ok(Source::OfflineExtra),
            2 => Ok(Source::Online),
            _ => Err(Error::Format(format!("unknown source code {c}"))),
        }
    }

    pub fn is_offline(self) -> bool {
        self != Source::Online
    }
}

/// One recorded episode in raw environment units.
///
/// Row `t` of `observations` is the state before `actions[t]` executes and
/// `rewards[t]` is the reward that action earned.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Tensor<f64>,
    pub actions: Tensor<f64>,
    pub rewards: Vec<f64>,
    pub success: bool,
    pub source: Source,
}

impl Episode {
    pub fn new(
        observations: Tensor<f64>,
        actions: Tensor<f64>,
        rewards: Vec<f64>,
        success: bool,
        source: Source,
    ) -> Result<Self> {
        let e = Self {
            observations,
            actions,
            rewards,
            success,
            source,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.observations.rows();
        if self.actions.rows() != t || self.rewards.len() != t {
            return Err(Error::Data(format!(
                "episode lengths disagree: {} observations, {} actions, {} rewards",
                t,
                self.actions.rows(),
                self.rewards.len()
            )));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data("episode has non-finite rewards".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Training record for one decision point. Observations, prefixes and chunks
/// are normalized; rewards are raw.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionChunk {
    pub obs: Vec<f64>,
    /// `P * A`, row-major.
    pub prefix: Vec<f64>,
    /// `H * A`, row-major, entries in (-1, 1).
    pub chunk: Vec<f64>,
    /// Length `H`.
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub next_prefix: Vec<f64>,
    pub done: bool,
    pub source: Source,
}

/// Shapes shared by every transition of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkDims {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub chunk_len: usize,
    pub prefix_len: usize,
}

impl ChunkDims {
    pub fn check(&self, t: &TransitionChunk) -> Result<()> {
        let pa = self.prefix_len * self.action_dim;
        let ok = t.obs.len() == self.obs_dim
            && t.next_obs.len() == self.obs_dim
            && t.prefix.len() == pa
            && t.next_prefix.len() == pa
            && t.chunk.len() == self.chunk_len * self.action_dim
            && t.rewards.len() == self.chunk_len;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "transition does not match dims {self:?}"
            )))
        }
    }
}

/// Chunked transitions of one episode with the real-time prefix layout.
///
/// Decision indices are `t = 0, stride, 2 * stride, ...` with `t + P < T`.
/// At `t`: `obs = o_t`, `prefix = a[t .. t+P]`, `chunk = a[t+P .. t+P+H]`
/// with rewards `r[t+P .. t+P+H]`; the next decision point (stride `H`) sees
/// `o_{t+H}` and the final `P` actions of the chunk as its prefix. Steps past
/// the end repeat the last action with zero reward, and `done` is set when
/// the episode ends inside the chunk. Episodes with `T < P + 1` are skipped.
pub fn extract_chunks(
    episode: &Episode,
    chunk_len: usize,
    prefix_len: usize,
    stride: usize,
    norm: &NormStats,
) -> Result<Vec<TransitionChunk>> {
    episode.validate()?;
    if chunk_len == 0 || stride == 0 {
        return Err(Error::Argument(
            "chunk length and stride must be positive".into(),
        ));
    }
    if prefix_len > chunk_len {
        return Err(Error::Argument(format!(
            "prefix length {prefix_len} exceeds chunk length {chunk_len}"
        )));
    }
    let t_len = episode.len();
    if t_len < prefix_len + 1 {
        log::warn!(
            "skipping episode of length {t_len}: needs at least {} steps",
            prefix_len + 1
        );
        return Ok(Vec::new());
    }
    let a_dim = episode.action_dim();
    let act = |i: usize| -> Vec<f64> {
        let raw = episode.actions.row(i.min(t_len - 1));
        norm.normalize_action(raw)
    };
    let actions = |from: usize, n: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(n * a_dim);
        for i in from..from + n {
            v.extend(act(i));
        }
        v
    };
    let obs = |i: usize| norm.normalize_obs(episode.observations.row(i.min(t_len - 1)));
    let mut out = Vec::new();
    let mut t = 0;
    while t + prefix_len < t_len {
        let start = t + prefix_len;
        let rewards = (start..start + chunk_len)
            .map(|i| if i < t_len { episode.rewards[i] } else { 0.0 })
            .collect();
        let done = start + chunk_len >= t_len;
        out.push(TransitionChunk {
            obs: obs(t),
            prefix: actions(t, prefix_len),
            chunk: actions(start, chunk_len),
            rewards,
            next_obs: obs(t + chunk_len),
            next_prefix: actions(t + chunk_len, prefix_len),
            done,
            source: episode.source,
        });
        t += stride;
    }
    Ok(out)
}

/// Column-stacked transitions in the model's scalar type.
#[derive(Clone, Debug)]
pub struct TransitionBatch<T> {
    pub obs: Tensor<T>,
    pub prefix: Tensor<T>,
    pub chunks: Tensor<T>,
    /// `[B, H]`.
    pub rewards: Tensor<T>,
    pub next_obs: Tensor<T>,
    pub next_prefix: Tensor<T>,
    pub done: Vec<bool>,
    /// `true` for rows drawn from offline data.
    pub offline: Vec<bool>,
}

impl<T: Scalar> TransitionBatch<T> {
    pub fn from_rows(rows: &[&TransitionChunk], dims: ChunkDims) -> Result<Self> {
        for r in rows {
            dims.check(r)?;
        }
        let b = rows.len();
        let pa = dims.prefix_len * dims.action_dim;
        let ha = dims.chunk_len * dims.action_dim;
        let stack = |w: usize, f: &dyn Fn(&TransitionChunk) -> &[f64]| {
            let mut v = Vec::with_capacity(b * w);
            for r in rows {
                v.extend(f(r).iter().map(|&x| lit::<T>(x)));
            }
            Tensor::from_vec(b, w, v)
        };
        let chunks = stack(ha, &|r| &r.chunk)?.map(clip_action);
        Ok(Self {
            obs: stack(dims.obs_dim, &|r| &r.obs)?,
            prefix: stack(pa, &|r| &r.prefix)?,
            chunks,
            rewards: stack(dims.chunk_len, &|r| &r.rewards)?,
            next_obs: stack(dims.obs_dim, &|r| &r.next_obs)?,
            next_prefix: stack(pa, &|r| &r.next_prefix)?,
            done: rows.iter().map(|r| r.done).collect(),
            offline: rows.iter().map(|r| r.source.is_offline()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows whose flag in `keep` is set.
    pub fn select(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        let pick = |v: &[bool]| idx.iter().map(|&i| v[i]).collect();
        Self {
            obs: self.obs.select_rows(&idx),
            prefix: self.prefix.select_rows(&idx),
            chunks: self.chunks.select_rows(&idx),
            rewards: self.rewards.select_rows(&idx),
            next_obs: self.next_obs.select_rows(&idx),
            next_prefix: self.next_prefix.select_rows(&idx),
            done: pick(&self.done),
            offline: pick(&self.offline),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(t: usize, a: usize) -> Episode {
        let obs = Tensor::from_fn(t, 2, |i, j| (i * 2 + j) as f64);
        let act = Tensor::from_fn(t, a, |i, j| i as f64 + 0.1 * j as f64);
        let rew = (0..t).map(|i| i as f64).collect();
        Episode::new(obs, act, rew, true, Source::Demo).unwrap()
    }

    fn identity_norm(a: usize) -> NormStats {
        NormStats::identity(2, a)
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn twenty_three_steps_give_two_decisions() {
        let ep = episode(23, 1);
        let norm = NormStats::fit(std::slice::from_ref(&ep)).unwrap();
        let c = extract_chunks(&ep, 10, 3, 10, &norm).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].obs, norm.normalize_obs(ep.observations.row(0)));
        assert_eq!(c[1].obs, norm.normalize_obs(ep.observations.row(10)));
        assert_eq!(c[1].rewards, (13..23).map(|i| i as f64).collect::<Vec<_>>());
        assert!(!c[0].done);
        assert!(c[1].done);
        assert_eq!(c[0].next_prefix, c[1].prefix);
    }

    #[test]
    fn short_tail_is_padded() {
        let ep = episode(25, 1);
        let c = extract_chunks(&ep, 10, 3, 10, &identity_norm(1)).unwrap();
        assert_eq!(c.len(), 3);
        let last = &c[2];
        assert_eq!(last.rewards[..2], [23.0, 24.0]);
        assert!(last.rewards[2..].iter().all(|&r| r == 0.0));
        assert!(last.chunk[2..].iter().all(|&x| (x - 24.0).abs() < 1e-9));
        assert!(last.done);
    }

    #[test]
    fn per_step_degenerate_layout() {
        let ep = episode(5, 2);
        let c = extract_chunks(&ep, 1, 0, 1, &identity_norm(2)).unwrap();
        assert_eq!(c.len(), 5);
        for (i, tr) in c.iter().enumerate() {
            assert_eq!(tr.rewards, vec![i as f64]);
            assert!(close(&tr.chunk, ep.actions.row(i)));
            assert!(tr.prefix.is_empty());
            assert_eq!(tr.done, i == 4);
        }
    }

    #[test]
    fn too_short_episodes_are_skipped() {
        let ep = episode(3, 1);
        assert!(extract_chunks(&ep, 4, 3, 4, &identity_norm(1))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn stride_h_covers_each_step_once() {
        for t in [4usize, 11, 23, 40] {
            for (h, p) in [(4usize, 0usize), (5, 2), (10, 3)] {
                let ep = episode(t, 1);
                let c = extract_chunks(&ep, h, p, h, &identity_norm(1)).unwrap();
                let mut seen = vec![0; t];
                for tr in &c {
                    let start = tr.chunk[0].round() as usize;
                    for s in start..(start + h).min(t) {
                        seen[s] += 1;
                    }
                }
                assert!(
                    seen[p.min(t)..].iter().all(|&n| n == 1),
                    "t={t} h={h} p={p}"
                );
            }
        }
    }

    #[test]
    fn mismatched_episode_is_a_data_error() {
        let r = Episode::new(
            Tensor::zeros(3, 1),
            Tensor::zeros(2, 1),
            vec![0.0; 3],
            false,
            Source::Demo,
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
