//! A desk-scale one-stage sparse action detector.
//!
//! Queries sample features adaptively from a 4D (x, y, t, scale) feature
//! volume, mix them with query-generated weights, and are decoded into
//! keyframe detections or per-clip tubelets. The crate also carries the
//! set-prediction training criterion, tubelet linking, frame/video mAP and
//! a synthetic training harness.

pub mod autograd;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod criterion;
pub mod decoder;
pub mod error;
pub mod feature_space;
pub mod geometry;
pub mod infer;
pub mod io;
pub mod gradcheck;
pub mod mixer;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scenario;
pub mod tensor;
pub mod train;
pub mod tube;

pub use error::{Error, Result};
pub use tensor::Tensor;
