//! Weakly supervised scene graph generation.
//!
//! A student grounding network is trained from image-level supervision
//! (captions or unlocalized scene graphs) plus two teacher signals: detector
//! category labels and per-entity activation maps. Its groundings become
//! pseudo ground truth for a small fully supervised scene-graph classifier.
//!
//! Trainable math is generic over [`Scalar`] (`f32`/`f64`); box geometry and
//! metrics are generic over [`Metric`], which exact rationals also satisfy.
//! The aliases below fix the pipeline's working precision.

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grounder;
pub mod io;
pub mod ir;
pub mod nn;
pub mod parsing;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod scalar;
pub mod sgg;
pub mod synth;
pub mod teachers;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Metric, Scalar};

/// Working precision of the pipeline.
pub type Real = f64;
pub type Box2 = ir::BBox<Real>;
pub type Grounder = grounder::GrounderParams<Real>;
pub type Adaptor = fusion::AdaptorParams<Real>;
pub type Target = ir::TargetDistribution<Real>;
