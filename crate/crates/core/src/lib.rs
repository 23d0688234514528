pub mod attention;
pub mod autograd;
pub mod boxes;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sequence;
pub mod text;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
