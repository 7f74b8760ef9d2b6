//! Flood extent mapping on partially observed rasters with a hidden Markov
//! tree over the elevation split tree.
//!
//! The pipeline: build the split tree from elevation, learn parameters by EM
//! with sum-product messages, then label every cell by max-sum.

pub mod baselines;
pub mod cli;
pub mod em_learning;
pub mod error;
pub mod eval;
pub mod feature_model;
pub mod inference;
pub mod logmath;
pub mod message_passing;
pub mod raster_io;
pub mod split_tree;
pub mod synth;

#[cfg(test)]
mod test_support;

pub use em_learning::{initialize, run_em, EmTrace, ModelParams};
pub use error::{Error, Result};
pub use eval::{score, MetricsReport};
pub use feature_model::{ClassMixture, GaussianComponent};
pub use inference::{max_sum_infer, MapResult};
pub use message_passing::{infer_posteriors, Emissions, PosteriorTable};
pub use raster_io::{assemble_stack, RasterGrid, RasterStack, TrainingSet};
pub use split_tree::{build_split_tree, SplitTree};
