//! Runs the open-world scene graph pipeline over a dataset manifest.
//!
//! Stages (entities, map, detect, refine, relate, eval) are resumable: each
//! writes per-image records under `cache/stages/` keyed by a hash of the
//! configuration it depends on, and every model call goes through a
//! content-addressed log so a finished run can be replayed offline. Model
//! access is behind [`backends::Provider`]; [`backends::HttpProvider`] talks to
//! an OpenAI-compatible chat/embedding server and a small detection/depth shim.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod cli;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod synthetic;
