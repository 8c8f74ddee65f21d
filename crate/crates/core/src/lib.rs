//! Two-stage denoising-diffusion source localization on graphs.
//!
//! A coarse diffusion stage generates source-proximity degrees conditioned
//! on the cascade graph; a fine stage runs posterior-guided reverse
//! diffusion through a differentiable dissemination surrogate to recover
//! source nodes from disseminated observations.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], `f32` or
//! `f64`); the `*64` aliases below are the concrete types the pipeline and
//! CLI work with.

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod dissemination;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod pipeline;
pub mod positional;
pub mod scalar;
pub mod score_net;
pub mod seeds;

pub use error::{Error, Result};
pub use graph::{Cascade, Graph, NodeVector, ObservationVector, ProximityDegree, SourceIndicator};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Concrete `f64` instantiations used by the pipeline and CLI.
pub type NodeVector64 = NodeVector<f64>;
pub type Matrix64 = Matrix<f64>;
pub type NoiseSchedule64 = diffusion::NoiseSchedule<f64>;
pub type ScoreNet64 = score_net::ScoreNetParams<f64>;
pub type Surrogate64 = dissemination::DisseminationSurrogate<f64>;
pub type NoiseModel64 = dissemination::NoiseVarianceModel<f64>;
