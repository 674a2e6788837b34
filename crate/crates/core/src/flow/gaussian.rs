use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::bound::{bound_forward, clip_action};
use super::encoder::{ContextEncoder, ContextVar};
use super::model::{perturb_targets, IlBatch};
use super::FlowConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Linear, Mode};
use crate::params::ParamStore;
use crate::policy::{ChunkSampler, ImitationModel};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const LOG_STD_MID: f64 = -2.5;
const LOG_STD_HALF_RANGE: f64 = 2.5;

/// Tanh-squashed diagonal Gaussian over action chunks.
///
/// Shares the context encoder of [`FlowPolicy`](super::FlowPolicy) and uses
/// `log_std = -2.5 + 2.5 tanh(raw)`, so the standard deviation of the
/// pre-squash Gaussian lies in `(e^-5, 1)`.
#[derive(Clone, Debug)]
pub struct GaussianPolicy<T: Scalar> {
    cfg: FlowConfig,
    store: ParamStore<T>,
    encoder: ContextEncoder,
    hidden: Linear,
    out: Linear,
}

impl<T: Scalar> GaussianPolicy<T> {
    pub fn new(cfg: FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = ContextEncoder::new(
            &mut store,
            cfg.obs_dim,
            cfg.action_dim,
            cfg.prefix_len,
            cfg.hidden,
            rng,
        );
        let width = (1 + cfg.prefix_len) * cfg.hidden;
        let hidden = Linear::new(&mut store, "head.hidden", width, cfg.hidden, true, rng);
        let out = Linear::new(
            &mut store,
            "head.out",
            cfg.hidden,
            2 * cfg.chunk_size(),
            true,
            rng,
        );
        Ok(Self {
            cfg,
            store,
            encoder,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    /// Pre-squash mean and log standard deviation, each `[B, H*A]`.
    fn moments_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let pw = self.cfg.prefix_len * self.cfg.action_dim;
        if obs.cols() != self.cfg.obs_dim || prefix.cols() != pw || prefix.rows() != obs.rows() {
            return Err(Error::Shape(format!(
                "expected observation width {} and prefix width {pw}",
                self.cfg.obs_dim
            )));
        }
        let o = g.constant(obs.clone());
        let pr = g.constant(prefix.clone());
        let ContextVar { var, batch, tokens } = self.encoder.forward(g, p, o, pr);
        let flat = g.reshape(var, batch, tokens * self.cfg.hidden);
        let h = self.hidden.forward(g, p, flat);
        let h = g.gelu(h);
        let h = mode.dropout(g, h);
        let out = self.out.forward(g, p, h);
        let d = self.cfg.chunk_size();
        let mean = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let t = g.tanh(raw);
        let t = g.scale(t, lit(LOG_STD_HALF_RANGE));
        let log_std = g.add_scalar(t, lit(LOG_STD_MID));
        Ok((mean, log_std))
    }

    fn log_prob_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        chunks: &Tensor<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let d = self.cfg.chunk_size();
        if chunks.cols() != d || chunks.rows() != obs.rows() {
            return Err(Error::Shape(format!("chunks must be {}x{d}", obs.rows())));
        }
        let (u, ld) = bound_forward(chunks)?;
        let (mean, log_std) = self.moments_graph(g, p, obs, prefix, mode)?;
        let uv = g.constant(u);
        let diff = g.sub(uv, mean);
        let neg = g.neg(log_std);
        let inv = g.exp(neg);
        let z = g.mul(diff, inv);
        let sq = g.square(z);
        let quad = g.sum_cols(sq);
        let quad = g.scale(quad, lit(-0.5));
        let ls = g.sum_cols(log_std);
        let lp = g.sub(quad, ls);
        let c: T = lit(-0.918_938_533_204_672_8 * d as f64);
        let lp = g.add_scalar(lp, c);
        let ldv = g.constant(Tensor::from_vec(obs.rows(), 1, ld)?);
        Ok(g.add(lp, ldv))
    }
}

impl<T: Scalar> ChunkSampler<T> for GaussianPolicy<T> {
    fn chunk_len(&self) -> usize {
        self.cfg.chunk_len
    }

    fn action_dim(&self) -> usize {
        self.cfg.action_dim
    }

    /// `u = mean + std * sigma * eps`, `a = tanh(u)`; log-densities are those
    /// of the model (temperature 1).
    fn sample_chunks(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        if !(std > 0.0 && std <= 1.0) {
            return Err(Error::Config(format!(
                "sampling std must lie in (0, 1], got {std}"
            )));
        }
        let mut g = Graph::new();
        let (mean, log_std) = self.moments_graph(
            &mut g,
            Bind::frozen(&self.store),
            obs,
            prefix,
            &mut Mode::Eval,
        )?;
        let mean = g.value(mean);
        let log_std = g.value(log_std);
        let eps = Tensor::from_fn(mean.rows(), mean.cols(), |_, _| {
            let e: f64 = StandardNormal.sample(rng);
            lit::<T>(e * std)
        });
        let u = Tensor::from_fn(mean.rows(), mean.cols(), |i, j| {
            mean.get(i, j) + log_std.get(i, j).exp() * eps.get(i, j)
        });
        let a = u.map(|x| clip_action(x.tanh()));
        let lp = self.log_prob(obs, prefix, &a)?;
        Ok((a, Some(lp)))
    }
}

impl<T: Scalar> ImitationModel<T> for GaussianPolicy<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn log_prob(&self, obs: &Tensor<T>, prefix: &Tensor<T>, chunks: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let lp = self.log_prob_graph(
            &mut g,
            Bind::frozen(&self.store),
            obs,
            prefix,
            chunks,
            &mut Mode::Eval,
        )?;
        Ok(g.value(lp).data().to_vec())
    }

    fn il_loss_and_grad(
        &self,
        batch: &IlBatch<T>,
        noise_std: f64,
        rng: &mut dyn RngCore,
        mut mode: Mode<'_>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::Argument("imitation loss on an empty batch".into()));
        }
        let targets = perturb_targets(&batch.targets, noise_std, rng);
        let mut g = Graph::new();
        let lp = self.log_prob_graph(
            &mut g,
            Bind::trainable(&self.store),
            &batch.obs,
            &batch.prefix,
            &targets,
            &mut mode,
        )?;
        let m = g.mean_all(lp);
        let loss = g.neg(m);
        let grads = g.backward(loss);
        Ok((g.scalar_value(loss), grads.for_store(&self.store)))
    }
}
