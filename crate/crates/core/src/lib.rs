//! Heterogeneous self-distillation fault detector.
//!
//! A lightweight anchor-free detector (backbone + attention feature pyramid
//! + general-distribution box head) trained in two phases: a teacher without
//! distillation, then a student that matches the teacher's softened edge
//! distributions. Includes a synthetic missing-component dataset and the
//! image-level fault metrics used to evaluate it.

pub mod checkpoint;
pub mod config;
pub mod core_nn;
pub mod detector;
pub mod distill;
pub mod data_io;
pub mod error;
pub mod eval_metrics;
pub mod fca;
pub mod hkh;
pub mod hkn;
pub mod losses;
pub mod nn;

pub use error::{Error, Result};
