//! Suboptimal moving horizon estimation over the trajectory of an auxiliary
//! observer, with horizon certification and a seeded simulation harness.

pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lyapcert;
pub mod mhe;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
