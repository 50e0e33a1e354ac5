//! Expression-aware contrastive pretraining for facial images.
//!
//! The crate covers the whole pipeline: a frame manifest with landmarks,
//! a procedural face generator for desk-scale experiments, temporal
//! positive / hard-negative sampling, landmark-driven face swapping and
//! masking, the augmentation chains, the contrastive objectives with
//! eye/mouth false-negative cancellation, a small CPU network stack, the
//! pretraining loop and the downstream evaluation probes.

pub mod augment;
pub mod batch;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod downstream;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod face_ops;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod store;
pub mod synth;
pub mod temporal;

pub use data::{DatasetManifest, EvalReport, EvalTask, FrameRecord, Landmarks68, Point, Rect};
pub use error::{Error, Result};
