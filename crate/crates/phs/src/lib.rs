//! Std companion of `phs-core`: weight and store files, dataset manifests,
//! the synthetic quadrant corpus and its engineered model, the experiment
//! harness, heatmap export, and the HTTP service.

pub mod api;
pub mod corpus;
pub mod error;
pub mod formats;
pub mod harness;
pub mod heatmap;
pub mod manifest;
pub mod quadrant;
pub mod service;

pub use error::{PhsError, Result};
