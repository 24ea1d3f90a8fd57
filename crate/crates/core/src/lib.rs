pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod learning;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
