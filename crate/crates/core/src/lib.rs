//! Pure building blocks for a training-free open-world scene graph pipeline.
//!
//! Everything here is `no_std` (with `alloc`) and free of IO: model backends
//! are reached through the [`mapping::TextEncoder`] trait and through plain
//! strings returned by vision-language models. The `owsgg` crate wires these
//! pieces to HTTP backends, a replay cache and a CLI.

#![no_std]
// `!(x > 0.0)` is how parameters reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod depth;
pub mod detection;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod refine;
pub mod relation;
pub mod taxonomy;

mod parse;

pub use depth::DepthMap;
pub use detection::DetectionSet;
pub use model::{
    clamp_box, iou, normalize_label, BoundingBox, CoordinateStyle, Dataset, Direction, GroundTruthGraph, GtRelation,
    ImageRef, ObjectInstance, PipelineConfig, Task, TripletPrediction, VocabularyProfile,
};
