//! Trajectory grounding for vision-and-language navigation.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod navgraph;
pub mod numerics;
pub mod recipe;
pub mod render;
pub mod rng;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
