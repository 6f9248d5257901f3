//! Confidence-driven tooling for a task-oriented semantic parser: a
//! synthetic calendar DSL and corpus, a count-based parser and gloss model,
//! calibration diagnostics, simulated annotator-in-the-loop decoding,
//! selective execution policies and cycle-consistent gloss selection.

pub mod confidence;
pub mod dsl;
pub mod gloss;
pub mod hitl;
pub mod model;
pub mod scalar;
pub mod selective;
pub mod text;

pub use scalar::Scalar;

/// Reports and confidences in single precision.
pub type SelectiveReport32 = selective::SelectiveReport<f32>;
/// Reports and confidences in double precision.
pub type SelectiveReport64 = selective::SelectiveReport<f64>;
pub type CalibrationReport32 = confidence::CalibrationReport<f32>;
pub type CalibrationReport64 = confidence::CalibrationReport<f64>;
pub type HitlReport32 = hitl::HitlReport<f32>;
pub type HitlReport64 = hitl::HitlReport<f64>;
pub type ScoredDecode32 = model::ScoredDecode<f32>;
pub type ScoredDecode64 = model::ScoredDecode<f64>;
pub type StepDistribution32 = model::StepDistribution<f32>;
pub type StepDistribution64 = model::StepDistribution<f64>;
