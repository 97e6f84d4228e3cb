//! Multi-view zero-shot 3D anomaly detection.

// `!(x > 0.0)` is used on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cloud;
pub mod config;
pub mod encoder;
pub mod error;
pub mod export;
pub mod grid;
pub mod learning;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scoring;
pub mod spatial;
pub mod synthetic;
pub mod verify;
