//! Inherently interpretable multi-label image classification with
//! counterfactual class attribution maps.

pub mod checkpoint;
pub mod classifier;
pub mod critic;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod font;
pub mod generator;
pub mod grid;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod net;
pub mod optim;
pub mod report;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
