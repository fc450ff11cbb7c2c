//! Multi-human-parsing pipeline: cosine-space instance/category
//! correlation learning, joint-loss training, and NMS-free inference,
//! plus a deterministic synthetic dataset generator and evaluation
//! metrics. Everything runs on CPU with reproducible results.

pub mod autodiff;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod features;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
