//! Federated-learning poisoning simulator with cosine-similarity-based
//! client filtering and baseline robust aggregators.

pub mod attacks;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
