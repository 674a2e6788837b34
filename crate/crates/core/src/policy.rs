//! Policy interfaces shared by the flow, the Gaussian ablation head and test policies.

use rand::RngCore;

use crate::error::Result;
use crate::flow::IlBatch;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Draws normalized action chunks for a batch of (observation, prefix) rows.
///
/// Observations are `[B, D]` (normalized), prefixes `[B, P * A]`, and the
/// returned chunks `[B, H * A]` with entries in (-1, 1).
pub trait ChunkSampler<T: Scalar>: Send + Sync {
    fn chunk_len(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Samples one chunk per row with latent temperature `std`; also returns
    /// the model log-density of each chunk when the model has one.
    fn sample_chunks(
        &self,
        obs: &Tensor<T>,
        prefix: &Tensor<T>,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Option<Vec<T>>)>;
}

/// A sampler with an exact density that can be trained by imitation.
pub trait ImitationModel<T: Scalar>: ChunkSampler<T> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn log_prob(&self, obs: &Tensor<T>, prefix: &Tensor<T>, chunks: &Tensor<T>) -> Result<Vec<T>>;

    /// Mean negative log-likelihood of noise-perturbed targets and its gradients.
    fn il_loss_and_grad(
        &self,
        batch: &IlBatch<T>,
        noise_std: f64,
        rng: &mut dyn RngCore,
        mode: Mode<'_>,
    ) -> Result<(T, Vec<Tensor<T>>)>;
}
