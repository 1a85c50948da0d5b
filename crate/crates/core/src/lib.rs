//! Adversarial-robustness laboratory for side-scan-sonar object detection.
//!
//! The crate wires together a small fully-differentiable object detector, a
//! synthetic sonar waterfall generator, two pixel-interval safety properties,
//! a projected-gradient attack, a universal patch attack, a bisection search
//! for per-box robustness thresholds, and an adversarial-retraining loop with
//! detection metrics. The `rosar` binary exposes each stage as a subcommand
//! and the whole flow as `rosar pipeline`.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
