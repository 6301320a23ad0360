//! Closed-form continual learning over class-incremental segmentation
//! feature streams.
//!
//! Encoder features are lifted by a fixed random ReLU layer
//! ([`features::RhlProjector`]), a ridge classifier is fit in closed form at
//! the first step and then updated recursively as classes arrive
//! ([`analytic::AnalyticState`]). Background elements in later steps can be
//! pseudo-labeled from the previous model ([`pseudo2d`], [`pseudo3d`]), and
//! every step is scored by per-class IoU ([`metrics`]). [`protocol`] ties the
//! pieces into the step loop.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision types used by the command line.

pub mod analytic;
pub mod bench;
pub mod codec;
pub mod error;
pub mod features;
pub mod labels;
pub mod linalg;
pub mod manifest;
pub mod metrics;
pub mod protocol;
pub mod pseudo2d;
pub mod pseudo3d;
pub mod scalar;
pub mod synth;

pub use analytic::{AnalyticState, Prediction, UpdateMode};
pub use error::{Error, ErrorKind, Result};
pub use labels::{ClassId, LabelMatrix, LabelRule, RawLabel};
pub use manifest::{MnProtocol, Relabeler, RunManifest};
pub use metrics::SegMetrics;
pub use protocol::{run_steps, ClassSchedule, EvalSet, RunOutcome, Setting, StepBatch};
pub use scalar::Scalar;
pub use synth::SynthSpec;

pub type State = AnalyticState<f64>;
pub type StateF32 = AnalyticState<f32>;
pub type Projector = features::RhlProjector<f64>;
pub type ProjectorF32 = features::RhlProjector<f32>;
pub type Batch = StepBatch<f64>;
pub type Eval = EvalSet<f64>;
pub type Outcome = RunOutcome<f64>;
