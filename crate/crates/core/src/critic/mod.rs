//! Action-chunked distributional critic with HL-Gauss targets.

mod ensemble;
mod network;
mod support;

pub use ensemble::CriticEnsemble;
pub use network::{CriticConfig, CriticNet};
pub use support::{hl_gauss_project, scalar_q, CategoricalValue, ValueSupport, HL_SIGMA_RATIO};
