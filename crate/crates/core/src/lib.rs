//! Iterative L-infinity bounded perturbations that make a two-stage object
//! detector miss every object in an image, or misclassify chosen sensitive
//! categories, plus the tooling to measure how well that works.

pub mod attack;
pub mod baselines;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod par;
pub mod scene;

pub use error::{Error, Result};
