use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{batch_rows, Bind, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Conditioning tokens: one observation token followed by one token per
/// prefix action, each of the flow's hidden width. Stacked as
/// `[batch * (1 + P), hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningContext<T> {
    pub tokens: Tensor<T>,
    pub tokens_per_sample: usize,
}

/// Graph-side handle of a conditioning context.
#[derive(Clone, Copy, Debug)]
pub struct ContextVar {
    pub var: Var,
    pub batch: usize,
    pub tokens: usize,
}

/// Maps `(observation, prefix actions)` to conditioning tokens.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    obs_in: Linear,
    obs_out: Linear,
    prefix_in: Option<Linear>,
    prefix_pos: Option<ParamId>,
    prefix_len: usize,
    action_dim: usize,
}

impl ContextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        obs_dim: usize,
        action_dim: usize,
        prefix_len: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let obs_in = Linear::new(store, "enc.obs_in", obs_dim, hidden, true, rng);
        let obs_out = Linear::new(store, "enc.obs_out", hidden, hidden, true, rng);
        let (prefix_in, prefix_pos) = if prefix_len > 0 {
            (
                Some(Linear::new(
                    store,
                    "enc.prefix_in",
                    action_dim,
                    hidden,
                    true,
                    rng,
                )),
                Some(store.add_normal("enc.prefix_pos", prefix_len, hidden, 0.02, rng)),
            )
        } else {
            (None, None)
        };
        Self {
            obs_in,
            obs_out,
            prefix_in,
            prefix_pos,
            prefix_len,
            action_dim,
        }
    }

    /// `obs` is `[B, D]`, `prefix` is `[B, P * A]` (ignored when `P = 0`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        obs: Var,
        prefix: Var,
    ) -> ContextVar {
        let batch = g.shape(obs).0;
        let h = self.obs_in.forward(g, p, obs);
        let h = g.silu(h);
        let obs_tok = self.obs_out.forward(g, p, h);
        let tokens = 1 + self.prefix_len;
        let var = match (&self.prefix_in, self.prefix_pos) {
            (Some(lin), Some(pos)) => {
                let pr = g.reshape(prefix, batch * self.prefix_len, self.action_dim);
                let e = lin.forward(g, p, pr);
                let pos = p.p(g, pos);
                let pos = g.tile(pos, batch);
                let e = g.add(e, pos);
                let obs_rows = batch_rows(batch, tokens, &[0]);
                let pre_pos: Vec<usize> = (1..tokens).collect();
                let pre_rows = batch_rows(batch, tokens, &pre_pos);
                g.scatter_rows(vec![(obs_tok, obs_rows), (e, pre_rows)], batch * tokens)
            }
            _ => obs_tok,
        };
        ContextVar { var, batch, tokens }
    }
}
