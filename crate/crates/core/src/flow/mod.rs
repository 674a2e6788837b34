//! Conditional normalizing-flow policy over action chunks.
//!
//! The generative direction maps a Gaussian latent `z0` through `K` affine
//! coupling blocks and a final element-wise `tanh` to an action chunk in the
//! open box `(-1, 1)^{H x A}`. The likelihood direction runs the same maps
//! backwards (`arctanh`, then blocks `K..1`), which yields exact
//! log-densities via the change-of-variables formula.

mod bound;
mod coupling;
mod encoder;
mod gaussian;
mod model;

pub use bound::{bound_forward, bound_inverse, clip_action, ACTION_CLIP};
pub use coupling::{CouplingBlock, Partition, TokenLayout};
pub use encoder::{ConditioningContext, ContextEncoder};
pub use gaussian::GaussianPolicy;
pub use model::{perturb_targets, FlowPolicy, IlBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `H x A` matrix of normalized actions, every entry strictly inside (-1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk<T>(Tensor<T>);

impl<T: Scalar> ActionChunk<T> {
    pub fn new(chunk_len: usize, action_dim: usize, values: Vec<T>) -> Result<Self> {
        let t = Tensor::from_vec(chunk_len, action_dim, values)?;
        if let Some(x) = t.data().iter().find(|x| !(x.abs() < T::one())) {
            return Err(Error::Domain(format!(
                "action chunk entry {x} outside (-1, 1)"
            )));
        }
        Ok(Self(t))
    }

    pub fn chunk_len(&self) -> usize {
        self.0.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    /// Row-major flattening, the layout used by batched tensors.
    pub fn as_slice(&self) -> &[T] {
        self.0.data()
    }

    pub fn into_inner(self) -> Tensor<T> {
        self.0
    }
}

/// Unbounded latent with the same shape as an [`ActionChunk`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentChunk<T>(pub Tensor<T>);

/// Architecture and noise settings of a [`FlowPolicy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Chunk length `H`.
    pub chunk_len: usize,
    /// Number of prefix actions `P` used as conditioning.
    pub prefix_len: usize,
    /// Number of coupling blocks `K`.
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward expansion of the conditioner's gated MLP.
    pub ffn_mult: usize,
    /// Standard deviation of the Gaussian perturbation of imitation targets.
    pub noise_std: f64,
    /// Latent standard deviation used for inference sampling.
    pub sample_std: f64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
            ("chunk_len", self.chunk_len),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(self.sample_std > 0.0 && self.sample_std <= 1.0) {
            return Err(Error::Config(format!(
                "sample_std must lie in (0, 1], got {}",
                self.sample_std
            )));
        }
        Ok(())
    }

    /// Flattened chunk size `H * A`.
    pub fn chunk_size(&self) -> usize {
        self.chunk_len * self.action_dim
    }
}
