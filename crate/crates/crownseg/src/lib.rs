//! Tree-crown instance segmentation: data pipeline, promptable-segmenter adapter, region-based
//! detectors, learned prompters, training harness and evaluation.
pub mod cli;
pub mod config;
pub mod data;
pub mod detectors;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod prompter;
pub mod rcnn;
pub mod render;
pub mod sam;
pub mod synth;
pub mod trainer;
pub use error::{Error, Result};
