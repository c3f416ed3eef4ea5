//! Evaluation and data-pipeline tooling for region-aware video language models.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`segmenter`] and [`ranker`] turn per-second video features into filtered
//!   temporal segment proposals.
//! * [`tiling`] does vision-token accounting for tiled images and sampled frames.
//! * [`protocol`], [`metrics`] and [`judge`] format task prompts, parse model
//!   outputs, and score them (MBAcc, recall@IoU, SODA, judge accuracy).
//! * [`mcqbuild`] turns QA pairs into balanced multi-binary MCQ benchmarks.
//! * [`scaling`] fits power laws to Pareto frontiers of error vs. compute.
//! * [`overlay`] draws region boxes on frames.
//! * [`io`] and [`eval`] handle JSONL ingestion, validation, and end-to-end runs.

pub mod error;
pub mod eval;
pub mod io;
pub mod judge;
pub mod mcqbuild;
pub mod metrics;
pub mod overlay;
pub mod protocol;
pub mod ranker;
pub mod scaling;
pub mod segmenter;
pub mod template;
pub mod tiling;

pub use error::{Error, Result};
