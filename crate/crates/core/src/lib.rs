//! Core algorithms for tree crown instance segmentation on drone orthomosaics.
//!
//! Everything in this crate is `no_std` with `alloc`: geometry and tiling, class schemas and
//! taxonomies, DSM peak prompts, non-maximum suppression, COCO-style metrics, reference loss
//! implementations and learning-rate schedules. File formats, models and the command line live
//! in the `crownseg` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod color;
pub mod detection;
pub mod dsm;
pub mod error;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod nms;
pub mod prompts;
pub mod raster;
pub mod rle;
pub mod schedule;
pub mod stats;
pub mod taxonomy;
pub mod tiling;

pub use detection::{BBox, Detection};
pub use error::{Error, Result};
pub use raster::{Grid, Mask};
