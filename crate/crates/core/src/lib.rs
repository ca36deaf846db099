//! Scheduling of heterogeneous battery modules for fast frequency response.

pub mod aging;
pub mod config;
pub mod error;
pub mod formulation;
pub mod model;
pub mod report;
pub mod scheduler;
pub mod signal;
pub mod solver;

pub use error::{Error, Result};
