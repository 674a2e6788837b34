use rand::seq::SliceRandom;
use rand::Rng;

use super::encoder::ContextVar;
use crate::graph::{Graph, Var};
use crate::nn::{batch_rows, Attention, Bind, Linear, Mode, RmsNorm, SwiGlu};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// How an `H x A` chunk is cut into tokens for the coupling blocks.
///
/// With `H >= 2` every time step is a token of width `A`. A single-step
/// chunk has only one time step to split, so its action dimensions become
/// width-1 tokens instead; the flat row-major data is identical in both
/// cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub tokens: usize,
    pub width: usize,
}

impl TokenLayout {
    pub fn for_chunk(chunk_len: usize, action_dim: usize) -> Self {
        if chunk_len >= 2 {
            Self {
                tokens: chunk_len,
                width: action_dim,
            }
        } else {
            Self {
                tokens: action_dim,
                width: 1,
            }
        }
    }
}

/// Fixed split of token positions into the conditioning set `k1`
/// (`ceil(L/2)` positions) and the transformed set `k2` (`floor(L/2)`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub k1: Vec<usize>,
    pub k2: Vec<usize>,
}

impl Partition {
    pub fn random(tokens: usize, rng: &mut impl Rng) -> Self {
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(rng);
        let n1 = tokens.div_ceil(2);
        let mut k1 = perm[..n1].to_vec();
        let mut k2 = perm[n1..].to_vec();
        k1.sort_unstable();
        k2.sort_unstable();
        Self { k1, k2 }
    }

    /// Boolean mask over token positions, `true` for `k2`.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.k1.len() + self.k2.len();
        let mut m = vec![false; n];
        for &i in &self.k2 {
            m[i] = true;
        }
        m
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        let k1 = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let k2 = (0..mask.len()).filter(|&i| mask[i]).collect();
        Self { k1, k2 }
    }
}

/// Direction of an affine coupling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// latent -> action: `y2 = exp(tanh(s)) * x2 + b`.
    Generate,
    /// action -> latent: `x2 = (y2 - b) * exp(-tanh(s))`.
    Normalize,
}

/// One affine coupling block with its attention conditioner.
///
/// The conditioner embeds the `k1` tokens, runs self-attention over them,
/// cross-attention into the conditioning context and a gated MLP; learned
/// query tokens for the `k2` positions then attend to the result and a GELU
/// head emits per-token `(s, b)`. The head is zero-initialised, so a fresh
/// block is the identity map.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub partition: Partition,
    layout: TokenLayout,
    embed: Linear,
    pos: ParamId,
    query_pos: ParamId,
    norm_self: RmsNorm,
    self_attn: Attention,
    norm_cross: RmsNorm,
    cross_attn: Attention,
    norm_ffn: RmsNorm,
    ffn: SwiGlu,
    norm_query: RmsNorm,
    norm_memory: RmsNorm,
    query_attn: Attention,
    head_hidden: Linear,
    head_out: Linear,
}

impl CouplingBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        index: usize,
        layout: TokenLayout,
        partition: Partition,
        hidden: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = |s: &str| format!("block{index}.{s}");
        let w = layout.width;
        Self {
            embed: Linear::new(store, &n("embed"), w, hidden, true, rng),
            pos: store.add_normal(n("pos"), layout.tokens, hidden, 0.02, rng),
            query_pos: store.add_normal(n("query_pos"), layout.tokens, hidden, 0.02, rng),
            norm_self: RmsNorm::new(store, &n("norm_self"), hidden),
            self_attn: Attention::new(store, &n("self_attn"), hidden, heads, rng),
            norm_cross: RmsNorm::new(store, &n("norm_cross"), hidden),
            cross_attn: Attention::new(store, &n("cross_attn"), hidden, heads, rng),
            norm_ffn: RmsNorm::new(store, &n("norm_ffn"), hidden),
            ffn: SwiGlu::new(store, &n("ffn"), hidden, hidden * ffn_mult, rng),
            norm_query: RmsNorm::new(store, &n("norm_query"), hidden),
            norm_memory: RmsNorm::new(store, &n("norm_memory"), hidden),
            query_attn: Attention::new(store, &n("query_attn"), hidden, heads, rng),
            head_hidden: Linear::new(store, &n("head_hidden"), hidden, hidden, true, rng),
            head_out: Linear::zeros(store, &n("head_out"), hidden, 2 * w),
            partition,
            layout,
        }
    }

    /// Parameter ids of the output head (zeroing them makes the block the identity).
    pub fn head_params(&self) -> [ParamId; 2] {
        [
            self.head_out.weight(),
            self.head_out.bias().expect("head has bias"),
        ]
    }

    /// Per-token `(s, b)` for the `k2` positions, each `[B * |k2|, width]`.
    fn conditioner<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        x1: Var,
        ctx: &ContextVar,
        mode: &mut Mode<'_>,
    ) -> (Var, Var) {
        let batch = ctx.batch;
        let pos = p.p(g, self.pos);
        let pos1 = g.gather_rows(pos, self.partition.k1.clone());
        let pos1 = g.tile(pos1, batch);
        let e = self.embed.forward(g, p, x1);
        let mut h = g.add(e, pos1);

        let n = self.norm_self.forward(g, p, h);
        let a = self.self_attn.forward(g, p, n, n, batch);
        h = g.add(h, a);

        let n = self.norm_cross.forward(g, p, h);
        let a = self.cross_attn.forward(g, p, n, ctx.var, batch);
        h = g.add(h, a);

        let n = self.norm_ffn.forward(g, p, h);
        let f = self.ffn.forward(g, p, n, mode);
        h = g.add(h, f);

        let qpos = p.p(g, self.query_pos);
        let q0 = g.gather_rows(qpos, self.partition.k2.clone());
        let q0 = g.tile(q0, batch);
        let qn = self.norm_query.forward(g, p, q0);
        let mem = self.norm_memory.forward(g, p, h);
        let a = self.query_attn.forward(g, p, qn, mem, batch);
        let u = g.add(q0, a);

        let hh = self.head_hidden.forward(g, p, u);
        let hh = g.gelu(hh);
        let out = self.head_out.forward(g, p, hh);
        let w = self.layout.width;
        let s = g.slice_cols(out, 0, w);
        let b = g.slice_cols(out, w, w);
        (s, b)
    }

    /// Applies the block to token rows `x` (`[B * L, width]`).
    ///
    /// Returns the transformed tokens and the per-sample log-determinant
    /// `[B, 1]` of this map (`None` when `k2` is empty and the block is the
    /// identity).
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        x: Var,
        ctx: &ContextVar,
        dir: Direction,
        mode: &mut Mode<'_>,
    ) -> (Var, Option<Var>) {
        if self.partition.k2.is_empty() {
            return (x, None);
        }
        let batch = ctx.batch;
        let l = self.layout.tokens;
        let rows1 = batch_rows(batch, l, &self.partition.k1);
        let rows2 = batch_rows(batch, l, &self.partition.k2);
        let x1 = g.gather_rows(x, rows1.clone());
        let x2 = g.gather_rows(x, rows2.clone());
        let (s, b) = self.conditioner(g, p, x1, ctx, mode);
        let ts = g.tanh(s);
        let (y2, ld_sign) = match dir {
            Direction::Generate => {
                let sc = g.exp(ts);
                let y = g.mul(sc, x2);
                (g.add(y, b), T::one())
            }
            Direction::Normalize => {
                let nts = g.neg(ts);
                let sc = g.exp(nts);
                let d = g.sub(x2, b);
                (g.mul(d, sc), -T::one())
            }
        };
        let out = g.scatter_rows(vec![(x1, rows1), (y2, rows2)], batch * l);
        let per = g.reshape(ts, batch, self.partition.k2.len() * self.layout.width);
        let ld = g.sum_cols(per);
        let ld = g.scale(ld, ld_sign);
        (out, Some(ld))
    }
}
