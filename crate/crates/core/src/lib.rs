//! Normalizing-flow action-chunk policies, chunked distributional critics and
//! an offline-to-online fine-tuning pipeline, with toy environments and exact
//! oracles for testing.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the scalar type for common use.

mod binio;
pub mod critic;
pub mod data;
pub mod envs;
pub mod error;
pub mod flow;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod policy;
pub mod scalar;
pub mod selector;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type FlowPolicyF64 = flow::FlowPolicy<f64>;
pub type FlowPolicyF32 = flow::FlowPolicy<f32>;
pub type CriticEnsembleF64 = critic::CriticEnsemble<f64>;
pub type CriticEnsembleF32 = critic::CriticEnsemble<f32>;
pub type TrainStateF64 = pipeline::TrainState<f64>;
pub type TrainStateF32 = pipeline::TrainState<f32>;
