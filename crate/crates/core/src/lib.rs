//! Relation-based important person detection on precomputed features.
//!
//! Persons in a scene attend to one another through stacked relation
//! modules; a small classifier turns each person's relation-enriched feature
//! into an importance point. Everything runs on a small reverse-mode tape.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod relation;
pub mod train;

pub use error::{Error, Result};
