//! SplineNets: conditional networks whose layer weights are points on
//! B-spline manifolds selected per sample.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod decisions;
mod error;
pub mod layers;
pub mod models;
pub mod params;
pub mod regularizer;
pub mod spline;
pub mod train;

pub use autodiff;
pub use error::{Error, Result};
