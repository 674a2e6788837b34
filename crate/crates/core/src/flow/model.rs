use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::bound::{bound_forward, clip_action};
use super::coupling::{CouplingBlock, Direction, Partition, TokenLayout};
use super::encoder::{ConditioningContext, ContextEncoder, ContextVar};
use super::FlowConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Mode};
use crate::params::ParamStore;
use crate::policy::{ChunkSampler, ImitationModel};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Imitation batch: observations `[B, D]`, prefixes `[B, P * A]`, target chunks `[B, H * A]`.
#[derive(Clone, Debug)]
pub struct IlBatch<T> {
    pub obs: Tensor<T>,
    pub prefix: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> IlBatch<T> {
    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }
}

/// Conditional normalizing flow over action chunks.
#[derive(Clone, Debug)]
pub struct FlowPolicy<T: Scalar> {
    cfg: FlowConfig,
    store: ParamStore<T>,
    encoder: ContextEncoder,
    blocks: Vec<CouplingBlock>,
    layout: TokenLayout,
}

/// Standard-normal log-density of each row.
pub(crate) fn std_normal_log_density<T: Scalar>(z: &Tensor<T>) -> Vec<T> {
    let c: T = lit(HALF_LN_2PI * z.cols() as f64);
    let half: T = lit(0.5);
    (0..z.rows())
        .map(|i| -half * z.row(i).iter().map(|&x| x * x).sum::<T>() - c)
        .collect()
}

/// Adds `N(0, noise_std^2)` to every target entry and clips back inside the box.
pub fn perturb_targets<T: Scalar>(
    targets: &Tensor<T>,
    noise_std: f64,
    rng: &mut dyn RngCore,
) -> Tensor<T> {
    let mut out = targets.clone();
    if noise_std > 0.0 {
        for x in out.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *x = clip_action(*x + lit(e * noise_std));
        }
    } else {
        out.data_mut().iter_mut().for_each(|x| *x = clip_action(*x));
    }
    out
}

impl<T: Scalar> FlowPolicy<T> {
    /// Builds a freshly initialised flow; partitions are drawn from `rng`.
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
        let layout = TokenLayout::for_chunk(cfg.chunk_len, cfg.action_dim);
        let partitions: Vec<Partition> = (0..cfg.depth)
            .map(|_| Partition::random(layout.tokens, rng))
            .collect();
        Ok(Self::assemble(cfg, store, encoder, layout, partitions, rng))
    }

    fn assemble(
        cfg: FlowConfig,
        mut store: ParamStore<T>,
        encoder: ContextEncoder,
        layout: TokenLayout,
        partitions: Vec<Partition>,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = partitions
            .into_iter()
            .enumerate()
            .map(|(i, part)| {
                CouplingBlock::new(
                    &mut store,
                    i,
                    layout,
                    part,
                    cfg.hidden,
                    cfg.heads,
                    cfg.ffn_mult,
                    rng,
                )
            })
            .collect();
        Self {
            cfg,
            store,
            encoder,
            blocks,
            layout,
        }
    }

    /// Rebuilds the parameter layout for known partitions (checkpoint loading).
    pub fn with_partitions(cfg: FlowConfig, masks: &[Vec<bool>]) -> Result<Self> {
        cfg.validate()?;
        let layout = TokenLayout::for_chunk(cfg.chunk_len, cfg.action_dim);
        if masks.len() != cfg.depth || masks.iter().any(|m| m.len() != layout.tokens) {
            return Err(Error::Format(format!(
                "expected {} partition masks over {} tokens",
                cfg.depth, layout.tokens
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let encoder = ContextEncoder::new(
            &mut store,
            cfg.obs_dim,
            cfg.action_dim,
            cfg.prefix_len,
            cfg.hidden,
            &mut rng,
        );
        let parts = masks.iter().map(|m| Partition::from_mask(m)).collect();
        Ok(Self::assemble(cfg, store, encoder, layout, parts, &mut rng))
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn partition_masks(&self) -> Vec<Vec<bool>> {
        self.blocks.iter().map(|b| b.partition.mask()).collect()
    }

    /// Zeroes every coupling head, turning the flow into the pure `tanh` bound.
    pub fn zero_conditioners(&mut self) {
        for b in &self.blocks {
            for id in b.head_params() {
                self.store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = T::zero());
            }
        }
    }

    fn check_rows(&self, obs: &Tensor<T>, prefix: &Tensor<T>) -> Result<usize> {
        let b = obs.rows();
        if obs.cols() != self.cfg.obs_dim {
            return Err(Error::Shape(format!(
                "observation width {} != configured {}",
                obs.cols(),
                self.cfg.obs_dim
            )));
        }
        let pw = self.cfg.prefix_len * self.cfg.action_dim;
        if prefix.cols() != pw || prefix.rows() != b {
            return Err(Error::Shape(format!(
                "prefix is {}x{}, expected {b}x{pw}",
                prefix.rows(),
                prefix.cols()
            )));
        }
        Ok(b)
    }

    fn check_chunks(&self, chunks: &Tensor<T>, rows: usize) -> Result<()> {
        if chunks.rows() != rows || chunks.cols() != self.cfg.chunk_size() {
            return Err(Error::Shape(format!(
                "chunks are {}x{}, expected {rows}x{}",
                chunks.rows(),
                chunks.cols(),
                self.cfg.chunk_size()
            )));
        }
        Ok(())
    }

    /// Context tokens inside a graph.
    pub fn context_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
    ) -> Result<ContextVar> {
        self.check_rows(obs, prefix)?;
        let o = g.constant(obs.clone());
        let pr = g.constant(prefix.clone());
        Ok(self.encoder.forward(g, p, o, pr))
    }

    /// Deterministic conditioning tokens for `(obs, prefix)` rows.
    pub fn encode_context(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
    ) -> Result<ConditioningContext<T>> {
        let mut g = Graph::new();
        let ctx = self.context_graph(&mut g, Bind::frozen(&self.store), obs, prefix)?;
        Ok(ConditioningContext {
            tokens: g.value(ctx.var).clone(),
            tokens_per_sample: ctx.tokens,
        })
    }

    /// Likelihood direction inside a graph: chunks `[B, H*A]` to latents.
    ///
    /// Returns `(z0 [B, H*A], log_det [B, 1])`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        chunks: &Tensor<T>,
        ctx: &ContextVar,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        self.check_chunks(chunks, ctx.batch)?;
        let (u, ld0) = bound_forward(chunks)?;
        let b = ctx.batch;
        let l = self.layout;
        let mut x = g.constant(u.reshape(b * l.tokens, l.width)?);
        let mut ld = g.constant(Tensor::from_vec(b, 1, ld0)?);
        for block in self.blocks.iter().rev() {
            let (y, bld) = block.apply(g, p, x, ctx, Direction::Normalize, mode);
            x = y;
            if let Some(bld) = bld {
                ld = g.add(ld, bld);
            }
        }
        let z0 = g.reshape(x, b, self.cfg.chunk_size());
        Ok((z0, ld))
    }

    /// Generative direction inside a graph: latents `[B, H*A]` to chunks.
    ///
    /// Returns `(a [B, H*A], log_det [B, 1])` where `log_det` is that of the
    /// latent-to-action map.
    pub fn inverse_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        z0: Var,
        ctx: &ContextVar,
        mode: &mut Mode<'_>,
    ) -> (Var, Var) {
        let b = ctx.batch;
        let l = self.layout;
        let mut x = g.reshape(z0, b * l.tokens, l.width);
        let mut ld: Option<Var> = None;
        for block in &self.blocks {
            let (y, bld) = block.apply(g, p, x, ctx, Direction::Generate, mode);
            x = y;
            if let Some(bld) = bld {
                ld = Some(match ld {
                    Some(acc) => g.add(acc, bld),
                    None => bld,
                });
            }
        }
        let u = g.reshape(x, b, self.cfg.chunk_size());
        let a = g.tanh(u);
        let ldt = g.log_dtanh(u);
        let ldt = g.sum_cols(ldt);
        let ld = match ld {
            Some(acc) => g.add(acc, ldt),
            None => ldt,
        };
        (a, ld)
    }

    /// `log p0(z)` per row inside a graph.
    pub fn base_log_density_graph(&self, g: &mut Graph<T>, z: Var) -> Var {
        let d = g.shape(z).1;
        let sq = g.square(z);
        let s = g.sum_cols(sq);
        let s = g.scale(s, lit(-0.5));
        g.add_scalar(s, lit(-HALF_LN_2PI * d as f64))
    }

    /// Per-row `log pi(a | obs, prefix)` inside a graph.
    pub fn log_prob_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        chunks: &Tensor<T>,
        ctx: &ContextVar,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let (z0, ld) = self.forward_graph(g, p, chunks, ctx, mode)?;
        let base = self.base_log_density_graph(g, z0);
        Ok(g.add(base, ld))
    }

    /// Likelihood direction: `(z0, log_det)` for each chunk row.
    pub fn flow_forward(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        chunks: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let mut g = Graph::new();
        let p = Bind::frozen(&self.store);
        let ctx = self.context_graph(&mut g, p, obs, prefix)?;
        let (z0, ld) = self.forward_graph(&mut g, p, chunks, &ctx, &mut Mode::Eval)?;
        Ok((g.value(z0).clone(), g.value(ld).data().to_vec()))
    }

    /// Generative direction: `(a, log_det)` for each latent row.
    pub fn flow_inverse(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        z0: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let mut g = Graph::new();
        let p = Bind::frozen(&self.store);
        let ctx = self.context_graph(&mut g, p, obs, prefix)?;
        self.check_chunks(z0, ctx.batch)?;
        let z = g.constant(z0.clone());
        let (a, ld) = self.inverse_graph(&mut g, p, z, &ctx, &mut Mode::Eval);
        Ok((g.value(a).clone(), g.value(ld).data().to_vec()))
    }

    /// Exact `log pi(a | obs, prefix)` per row.
    pub fn log_prob(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        chunks: &Tensor<T>,
    ) -> Result<Vec<T>> {
        let (z0, ld) = self.flow_forward(obs, prefix, chunks)?;
        Ok(std_normal_log_density(&z0)
            .into_iter()
            .zip(ld)
            .map(|(b, l)| b + l)
            .collect())
    }

    /// Draws `z0 ~ N(0, std^2 I)` and maps it to chunks.
    ///
    /// The returned log-probabilities are model densities: the base term is
    /// evaluated under `N(0, I)` regardless of `std`.
    pub fn sample(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        if !(std > 0.0 && std <= 1.0) {
            return Err(Error::Config(format!(
                "sampling std must lie in (0, 1], got {std}"
            )));
        }
        let z = self.draw_latents(obs.rows(), std, rng);
        let (a, ld) = self.flow_inverse(obs, prefix, &z)?;
        let logp = std_normal_log_density(&z)
            .into_iter()
            .zip(ld)
            .map(|(b, l)| b - l)
            .collect();
        Ok((a, logp))
    }

    /// `[rows, H*A]` Gaussian latents with standard deviation `std`.
    pub fn draw_latents(&self, rows: usize, std: f64, rng: &mut dyn RngCore) -> Tensor<T> {
        Tensor::from_fn(rows, self.cfg.chunk_size(), |_, _| {
            let e: f64 = StandardNormal.sample(rng);
            lit(e * std)
        })
    }

    /// Mean negative log-likelihood of noise-perturbed targets.
    pub fn il_loss_graph(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        batch: &IlBatch<T>,
        noise_std: f64,
        rng: &mut dyn RngCore,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Argument("imitation loss on an empty batch".into()));
        }
        let targets = perturb_targets(&batch.targets, noise_std, rng);
        let ctx = self.context_graph(g, p, &batch.obs, &batch.prefix)?;
        let lp = self.log_prob_graph(g, p, &targets, &ctx, mode)?;
        let m = g.mean_all(lp);
        Ok(g.neg(m))
    }

    /// Imitation loss value and its parameter gradients.
    pub fn il_loss_and_grad(
        &self,
        batch: &IlBatch<T>,
        noise_std: f64,
        rng: &mut dyn RngCore,
        mut mode: Mode<'_>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let loss = self.il_loss_graph(
            &mut g,
            Bind::trainable(&self.store),
            batch,
            noise_std,
            rng,
            &mut mode,
        )?;
        let grads = g.backward(loss);
        Ok((g.scalar_value(loss), grads.for_store(&self.store)))
    }
}

impl<T: Scalar> ChunkSampler<T> for FlowPolicy<T> {
    fn chunk_len(&self) -> usize {
        self.cfg.chunk_len
    }

    fn action_dim(&self) -> usize {
        self.cfg.action_dim
    }

    fn sample_chunks(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let (a, lp) = self.sample(obs, prefix, std, rng)?;
        Ok((a, Some(lp)))
    }
}

impl<T: Scalar> ImitationModel<T> for FlowPolicy<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn log_prob(&self, obs: &Tensor<T>, prefix: &Tensor<T>, chunks: &Tensor<T>) -> Result<Vec<T>> {
        FlowPolicy::log_prob(self, obs, prefix, chunks)
    }

    fn il_loss_and_grad(
        &self,
        batch: &IlBatch<T>,
        noise_std: f64,
        rng: &mut dyn RngCore,
        mode: Mode<'_>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        FlowPolicy::il_loss_and_grad(self, batch, noise_std, rng, mode)
    }
}
