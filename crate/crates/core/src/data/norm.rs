use serde::{Deserialize, Serialize};

use super::Episode;
use crate::error::{Error, Result};

/// Dataset action extrema map to `±ACTION_MARGIN`.
pub const ACTION_MARGIN: f64 = 0.999;

const WIDEN: f64 = 1e-6;

/// Per-dimension action range and observation moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub act_min: Vec<f64>,
    pub act_max: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
}

impl NormStats {
    pub fn fit(episodes: &[Episode]) -> Result<Self> {
        let first = episodes
            .iter()
            .find(|e| !e.is_empty())
            .ok_or_else(|| Error::Argument("cannot fit statistics on an empty corpus".into()))?;
        let (d, a) = (first.obs_dim(), first.action_dim());
        let mut act_min = vec![f64::INFINITY; a];
        let mut act_max = vec![f64::NEG_INFINITY; a];
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for e in episodes {
            if e.obs_dim() != d || e.action_dim() != a {
                return Err(Error::Data("episodes disagree on dimensions".into()));
            }
            for t in 0..e.len() {
                for (j, &x) in e.actions.row(t).iter().enumerate() {
                    act_min[j] = act_min[j].min(x);
                    act_max[j] = act_max[j].max(x);
                }
                for (j, &x) in e.observations.row(t).iter().enumerate() {
                    sum[j] += x;
                    sq[j] += x * x;
                }
                n += 1;
            }
        }
        for j in 0..a {
            if act_max[j] - act_min[j] < WIDEN {
                act_min[j] -= WIDEN;
                act_max[j] += WIDEN;
            }
        }
        let nf = n as f64;
        let obs_mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let obs_std = sq
            .iter()
            .zip(&obs_mean)
            .map(|(s, m)| {
                let v = (s / nf - m * m).max(0.0).sqrt();
                if v < WIDEN {
                    1.0
                } else {
                    v
                }
            })
            .collect();
        Ok(Self {
            act_min,
            act_max,
            obs_mean,
            obs_std,
        })
    }

    /// Statistics under which normalization is the identity.
    pub fn identity(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            act_min: vec![-ACTION_MARGIN; action_dim],
            act_max: vec![ACTION_MARGIN; action_dim],
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.act_min.len()
    }

    pub fn normalize_action(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, &x)| {
                let (lo, hi) = (self.act_min[j], self.act_max[j]);
                ACTION_MARGIN * (2.0 * (x - lo) / (hi - lo) - 1.0)
            })
            .collect()
    }

    pub fn unnormalize_action(&self, a: &[f64]) -> Vec<f64> {
        let j_dim = self.action_dim();
        a.iter()
            .enumerate()
            .map(|(i, &y)| {
                let j = i % j_dim;
                let (lo, hi) = (self.act_min[j], self.act_max[j]);
                lo + (y / ACTION_MARGIN + 1.0) * 0.5 * (hi - lo)
            })
            .collect()
    }

    pub fn normalize_obs(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, &x)| (x - self.obs_mean[j]) / self.obs_std[j])
            .collect()
    }

    /// Normalizes a flattened sequence of actions (`n * A` values).
    pub fn normalize_actions(&self, raw: &[f64]) -> Vec<f64> {
        raw.chunks(self.action_dim().max(1))
            .flat_map(|r| self.normalize_action(r))
            .collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [
            &self.act_min[..],
            &self.act_max[..],
            &self.obs_mean[..],
            &self.obs_std[..],
        ]
        .concat()
    }

    pub fn from_vec(obs_dim: usize, action_dim: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 2 * (obs_dim + action_dim) {
            return Err(Error::Format(
                "normalization block has the wrong size".into(),
            ));
        }
        let (a, rest) = v.split_at(action_dim);
        let (b, rest) = rest.split_at(action_dim);
        let (m, s) = rest.split_at(obs_dim);
        Ok(Self {
            act_min: a.to_vec(),
            act_max: b.to_vec(),
            obs_mean: m.to_vec(),
            obs_std: s.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Source;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn stats() -> NormStats {
        let obs = Tensor::from_fn(3, 2, |i, j| (i + j) as f64);
        let act = Tensor::from_rows(&[vec![-2.0, 5.0], vec![2.0, 5.0], vec![0.5, 5.0]]).unwrap();
        let ep = Episode::new(obs, act, vec![0.0; 3], true, Source::Demo).unwrap();
        NormStats::fit(&[ep]).unwrap()
    }

    #[test]
    fn symmetric_range_maps_zero_to_zero_and_extrema_to_margin() {
        let s = stats();
        assert_eq!(s.normalize_action(&[0.0, 5.0])[0], 0.0);
        assert!((s.normalize_action(&[2.0, 5.0])[0] - 0.999).abs() < 1e-15);
        assert!((s.normalize_action(&[-2.0, 5.0])[0] + 0.999).abs() < 1e-15);
    }

    #[test]
    fn constant_dimensions_are_widened() {
        let s = stats();
        assert!(s.act_max[1] > s.act_min[1]);
        assert!(s.normalize_action(&[0.0, 5.0])[1].abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(NormStats::fit(&[]), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn action_round_trip(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let s = stats();
            let back = s.unnormalize_action(&s.normalize_action(&[x, y]));
            prop_assert!((back[0] - x).abs() < 1e-9);
            prop_assert!((back[1] - y).abs() < 1e-9);
        }
    }
}
