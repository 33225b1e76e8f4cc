//! Reinforcement learning from rendering feedback for SVG generation.
//!
//! Rewards come from rasterizing generated SVG and comparing it with the
//! target image. A small linear policy over a restricted SVG grammar is
//! trained by supervised fine-tuning and then by group relative policy
//! optimization on those rewards.

pub mod checkpoint;
pub mod config;
pub mod curation;
pub mod grpo;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod raster;
pub mod reward;
pub mod runlog;
pub mod semantic;
pub mod svg;
pub mod train;
