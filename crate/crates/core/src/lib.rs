//! Semi-supervised oriented object detection on synthetic aerial layouts.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: oriented boxes, angle normalization, rotated IoU
//! - [`ot`]: cost matrices, Sinkhorn with dual potentials, exact LP oracle
//! - [`losses`]: dense pseudo-label losses, rotation-aware weighting, global consistency
//! - [`pseudo_label`]: decoding, rotated NMS, dense sampling, pairing
//! - [`scenes`]: synthetic layouts, feature fields, dense targets
//! - [`model`]: a per-cell dense predictor with hand-written backward pass
//! - [`mean_teacher`]: EMA teacher, burn-in, training step
//! - [`eval`]: rotated-IoU matching and mAP
//! - [`harness`]: experiment configs, runs, sweeps
//! - [`selftest`]: oracle checks behind the `selftest` command

pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod mean_teacher;
pub mod model;
pub mod ot;
pub mod pseudo_label;
pub mod scenes;
pub mod selftest;

pub use error::{Error, Result};
