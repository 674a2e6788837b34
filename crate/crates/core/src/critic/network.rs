use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChunkDims;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{batch_rows, Attention, Bind, GeluMlp, Linear, Mode, RmsNorm};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub num_bins: usize,
    pub ensemble_size: usize,
    pub dropout: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            heads: 8,
            layers: 3,
            ffn_hidden: 256,
            num_bins: 101,
            ensemble_size: 2,
            dropout: 0.1,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(
                "critic hidden width must be a positive multiple of heads".into(),
            ));
        }
        if self.ffn_hidden == 0 || self.ensemble_size == 0 {
            return Err(Error::Config(
                "critic ffn_hidden and ensemble_size must be positive".into(),
            ));
        }
        if self.num_bins < 2 {
            return Err(Error::Config("critic needs at least 2 bins".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("critic dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: RmsNorm,
    attn: Attention,
    norm_ffn: RmsNorm,
    ffn: GeluMlp,
}

/// One ensemble member: observation, prefix and action-chunk tokens through
/// a small pre-norm transformer with GELU feed-forward blocks; the action
/// token (projected with an ELU) carries the bin logits.
#[derive(Clone, Debug)]
pub struct CriticNet {
    obs_in: Linear,
    prefix_in: Option<Linear>,
    act_in: Linear,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    out_norm: RmsNorm,
    head: Linear,
    tokens: usize,
}

impl CriticNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &CriticConfig,
        dims: ChunkDims,
        rng: &mut impl Rng,
    ) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        let h = cfg.hidden;
        let pa = dims.prefix_len * dims.action_dim;
        let obs_in = Linear::new(store, &n("obs_in"), dims.obs_dim, h, true, rng);
        let prefix_in = (pa > 0).then(|| Linear::new(store, &n("prefix_in"), pa, h, true, rng));
        let act_in = Linear::new(
            store,
            &n("act_in"),
            dims.chunk_len * dims.action_dim,
            h,
            true,
            rng,
        );
        let tokens = 2 + usize::from(pa > 0);
        let pos = store.add_normal(n("pos"), tokens, h, 0.02, rng);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer {
                norm_attn: RmsNorm::new(store, &n(&format!("layer{i}.norm_attn")), h),
                attn: Attention::new(store, &n(&format!("layer{i}.attn")), h, cfg.heads, rng),
                norm_ffn: RmsNorm::new(store, &n(&format!("layer{i}.norm_ffn")), h),
                ffn: GeluMlp::new(store, &n(&format!("layer{i}.ffn")), h, cfg.ffn_hidden, rng),
            })
            .collect();
        Self {
            obs_in,
            prefix_in,
            act_in,
            pos,
            layers,
            out_norm: RmsNorm::new(store, &n("out_norm"), h),
            head: Linear::new(store, &n("head"), h, cfg.num_bins, true, rng),
            tokens,
        }
    }

    /// Bin log-probabilities `[B, bins]`.
    pub fn log_probs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        obs: Var,
        prefix: Var,
        chunk: Var,
        mode: &mut Mode<'_>,
    ) -> Var {
        let batch = g.shape(obs).0;
        let l = self.tokens;
        let mut parts = vec![(self.obs_in.forward(g, p, obs), batch_rows(batch, l, &[0]))];
        if let Some(lin) = &self.prefix_in {
            parts.push((lin.forward(g, p, prefix), batch_rows(batch, l, &[1])));
        }
        let act_pos = l - 1;
        let act = self.act_in.forward(g, p, chunk);
        let act = g.elu(act);
        parts.push((act, batch_rows(batch, l, &[act_pos])));
        let x = g.scatter_rows(parts, batch * l);
        let pos = p.p(g, self.pos);
        let pos = g.tile(pos, batch);
        let mut h = g.add(x, pos);
        for layer in &self.layers {
            let n = layer.norm_attn.forward(g, p, h);
            let a = layer.attn.forward(g, p, n, n, batch);
            h = g.add(h, a);
            let n = layer.norm_ffn.forward(g, p, h);
            let f = layer.ffn.forward(g, p, n, mode);
            h = g.add(h, f);
        }
        let out = g.gather_rows(h, batch_rows(batch, l, &[act_pos]));
        let out = self.out_norm.forward(g, p, out);
        let logits = self.head.forward(g, p, out);
        g.log_softmax(logits)
    }
}
