pub mod config;
pub mod connector;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry_encoder;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rgbd;
pub mod seed;
pub mod training;
pub mod visual_encoder;

pub use error::{DetrError, Result};
