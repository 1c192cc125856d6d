//! Pre-training of multimodal user representations aligned with a social
//! graph: synthetic data, image/text/graph encoders, the pre-training
//! objectives, training, evaluation and run-directory plumbing.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod par;
pub mod plot;
pub mod rng;
pub mod run;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
