//! Black-box visual prompt selection for vision-language models.
//!
//! The pipeline renders candidate visual prompts onto images, scores how each
//! prompt changes a model's answers to object-presence questions, builds a
//! training set of per-image optimal prompts, trains a small router to pick a
//! prompt for unseen images, and evaluates the outcome with presence-question
//! and caption-hallucination metrics.

pub mod annotations;
pub mod dataset;
pub mod gateway;
pub mod http;
pub mod metrics;
pub mod pipeline;
pub mod pope;
pub mod raster;
pub mod router;
pub mod vp;

pub(crate) mod exec;
