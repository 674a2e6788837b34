//! Best-of-N chunk selection.
//!
//! Candidates are laid out candidate-major (`row = k * B + i`) and drawn in a
//! single sampler call, so the first `n` candidates of a seeded draw are the
//! same for every `N >= n`; with `N = 1` the result is exactly one plain
//! sample.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::CriticEnsemble;
use crate::data::NormStats;
use crate::envs::Actor;
use crate::error::{Error, Result};
use crate::policy::ChunkSampler;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

pub const N_SIMULATION: usize = 128;
pub const N_POST_IL: usize = 64;
pub const N_FINE_TUNING: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub n_samples: usize,
    pub sample_std: f64,
    /// Score by critic value; otherwise by model log-density.
    pub use_critic: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_samples: N_FINE_TUNING,
            sample_std: 0.7,
            use_critic: true,
        }
    }
}

impl SelectionConfig {
    /// One plain sample per decision.
    pub fn plain(sample_std: f64) -> Self {
        Self {
            n_samples: 1,
            sample_std,
            use_critic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.sample_std > 0.0 && self.sample_std <= 1.0) {
            return Err(Error::Config(format!(
                "sample_std must lie in (0, 1], got {}",
                self.sample_std
            )));
        }
        Ok(())
    }
}

/// Chosen chunks `[B, H * A]`, their scores and candidate indices.
#[derive(Clone, Debug)]
pub struct Selection<T> {
    pub chunks: Tensor<T>,
    pub scores: Vec<T>,
    pub indices: Vec<usize>,
}

fn repeat_rows<T: Scalar>(x: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.len() * n);
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(x.rows() * n, x.cols(), data).expect("repeated shape")
}

/// Selects one chunk per row of `obs`. Ties go to the lowest candidate index;
/// NaN scores never win.
pub fn select_chunks<T: Scalar>(
    obs: &Tensor<T>,
    prefix: &Tensor<T>,
    policy: &dyn ChunkSampler<T>,
    ensemble: Option<&CriticEnsemble<T>>,
    cfg: &SelectionConfig,
    rng: &mut dyn RngCore,
) -> Result<Selection<T>> {
    cfg.validate()?;
    let b = obs.rows();
    let n = cfg.n_samples;
    if cfg.use_critic && ensemble.is_none() {
        return Err(Error::Argument("critic selection needs an ensemble".into()));
    }
    let (obs_n, prefix_n) = if n == 1 {
        (obs.clone(), prefix.clone())
    } else {
        (repeat_rows(obs, n), repeat_rows(prefix, n))
    };
    let (cands, logp) = policy.sample_chunks(&obs_n, &prefix_n, cfg.sample_std, rng)?;
    let scores = match ensemble {
        Some(e) if cfg.use_critic => e.min_q(&obs_n, &prefix_n, &cands)?,
        _ => match logp {
            Some(lp) => lp,
            None if n == 1 => vec![T::zero(); b],
            None => {
                return Err(Error::Argument(
                    "log-density selection needs a policy with a density".into(),
                ))
            }
        },
    };
    let w = cands.cols();
    let mut chunks = Vec::with_capacity(b * w);
    let mut best_scores = Vec::with_capacity(b);
    let mut indices = Vec::with_capacity(b);
    for i in 0..b {
        let mut best = 0;
        for k in 1..n {
            let s = scores[k * b + i];
            let cur = scores[best * b + i];
            if s > cur || (cur.is_nan() && !s.is_nan()) {
                best = k;
            }
        }
        chunks.extend_from_slice(cands.row(best * b + i));
        best_scores.push(scores[best * b + i]);
        indices.push(best);
    }
    Ok(Selection {
        chunks: Tensor::from_vec(b, w, chunks)?,
        scores: best_scores,
        indices,
    })
}

/// Single-row convenience wrapper returning `(chunk, score)`.
pub fn select_chunk<T: Scalar>(
    obs: &[T],
    prefix: &[T],
    policy: &dyn ChunkSampler<T>,
    ensemble: Option<&CriticEnsemble<T>>,
    cfg: &SelectionConfig,
    rng: &mut dyn RngCore,
) -> Result<(Vec<T>, T)> {
    let o = Tensor::from_vec(1, obs.len(), obs.to_vec())?;
    let p = Tensor::from_vec(1, prefix.len(), prefix.to_vec())?;
    let s = select_chunks(&o, &p, policy, ensemble, cfg, rng)?;
    Ok((s.chunks.into_vec(), s.scores[0]))
}

/// Drives an environment with a learned policy: normalizes raw inputs,
/// selects in normalized space and maps chunks back to raw units.
pub struct PolicyActor<'a, T: Scalar> {
    policy: &'a dyn ChunkSampler<T>,
    ensemble: Option<&'a CriticEnsemble<T>>,
    norm: &'a NormStats,
    cfg: SelectionConfig,
    prefix_len: usize,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> PolicyActor<'a, T> {
    pub fn new(
        policy: &'a dyn ChunkSampler<T>,
        ensemble: Option<&'a CriticEnsemble<T>>,
        norm: &'a NormStats,
        cfg: SelectionConfig,
        prefix_len: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.use_critic && ensemble.is_none() {
            return Err(Error::Argument("critic selection needs an ensemble".into()));
        }
        Ok(Self {
            policy,
            ensemble,
            norm,
            cfg,
            prefix_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl<T: Scalar> Actor for PolicyActor<'_, T> {
    fn chunk_len(&self) -> usize {
        self.policy.chunk_len()
    }

    fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    fn act(&mut self, obs: &[Vec<f64>], prefix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let b = obs.len();
        let d = self.norm.obs_dim();
        let pa = self.prefix_len * self.policy.action_dim();
        let mut o = Vec::with_capacity(b * d);
        let mut p = Vec::with_capacity(b * pa);
        for (ob, pr) in obs.iter().zip(prefix) {
            o.extend(self.norm.normalize_obs(ob).into_iter().map(lit::<T>));
            p.extend(self.norm.normalize_actions(pr).into_iter().map(lit::<T>));
        }
        let o = Tensor::from_vec(b, d, o)?;
        let p = Tensor::from_vec(b, pa, p)?;
        let sel = select_chunks(&o, &p, self.policy, self.ensemble, &self.cfg, &mut self.rng)?;
        Ok((0..b)
            .map(|i| {
                let row: Vec<f64> = sel.chunks.row(i).iter().map(|&x| to_f64(x)).collect();
                self.norm.unnormalize_action(&row)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Emits a counter so candidate identity is visible in the chunk.
    struct Counter;

    impl ChunkSampler<f64> for Counter {
        fn chunk_len(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn sample_chunks(
            &self,
            obs: &Tensor<f64>,
            _prefix: &Tensor<f64>,
            _std: f64,
            rng: &mut dyn RngCore,
        ) -> Result<(Tensor<f64>, Option<Vec<f64>>)> {
            let v: Vec<f64> = (0..obs.rows())
                .map(|_| (rng.next_u32() % 1000) as f64 / 1000.0)
                .collect();
            let lp = v.iter().map(|x| -(x - 0.3f64).abs()).collect();
            Ok((Tensor::from_vec(obs.rows(), 1, v)?, Some(lp)))
        }
    }

    #[test]
    fn log_density_selection_picks_highest() {
        let o = Tensor::zeros(3, 1);
        let p = Tensor::zeros(3, 0);
        let cfg = SelectionConfig {
            n_samples: 16,
            sample_std: 1.0,
            use_critic: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = select_chunks(&o, &p, &Counter, None, &cfg, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (all, lp) = Counter
            .sample_chunks(&Tensor::zeros(48, 1), &Tensor::zeros(48, 0), 1.0, &mut rng)
            .unwrap();
        let lp = lp.unwrap();
        for i in 0..3 {
            let best = (0..16).map(|k| lp[k * 3 + i]).fold(f64::MIN, f64::max);
            assert_eq!(s.scores[i], best);
            assert_eq!(s.chunks.get(i, 0), all.get(s.indices[i] * 3 + i, 0));
        }
    }

    #[test]
    fn critic_selection_without_ensemble_is_rejected() {
        let o = Tensor::zeros(1, 1);
        let p = Tensor::zeros(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = select_chunks(
            &o,
            &p,
            &Counter,
            None,
            &SelectionConfig::default(),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Argument(_))));
        assert!(SelectionConfig {
            n_samples: 0,
            ..SelectionConfig::default()
        }
        .validate()
        .is_err());
    }
}
