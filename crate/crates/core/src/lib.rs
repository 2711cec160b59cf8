//! Evaluation toolkit for micro-target perception in ultra-high-resolution
//! images: geometry and mask scoring, coordinate protocols, answer parsing,
//! synthetic task generation, an agentic crop-and-inspect pipeline and
//! error diagnosis.

pub mod agent;
pub mod coords;
pub mod dataset;
pub mod diagnosis;
pub mod error;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod parse;
pub mod report;
pub mod task;
pub mod taskgen;

pub use error::{Error, Result};
