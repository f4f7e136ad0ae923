//! Facial-movement dynamics for workload analysis.
//!
//! The crate covers the full batch pipeline: keypoint ingestion
//! ([`ingest`]), cleaning ([`preprocess`]), Procrustes head-pose alignment
//! ([`align`]), kinematic features ([`features`]), recurrence quantification
//! ([`dynamics`]), task-performance scoring ([`taskperf`]), the random-forest
//! evaluation harness ([`ml`]), synthetic fixtures and oracles ([`synth`]) and
//! orchestration ([`pipeline`]).
//!
//! Numerical kernels are generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation the pipeline uses.

pub mod align;
pub mod dynamics;
pub mod error;
pub mod features;
pub mod ingest;
pub mod ml;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod taskperf;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar type used by the pipeline.
pub type Scalar = f64;
pub type Keypoints = ingest::KeypointSeries<Scalar>;
pub type Template = align::Template<Scalar>;
pub type HeadPose = align::HeadPose<Scalar>;
pub type Trajectory = dynamics::Trajectory<Scalar>;
