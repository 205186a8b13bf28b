//! Federated learning with server momentum: training engine, stability
//! probes and theoretical bound calculators.

pub mod bounds;
pub mod data;
pub mod dataset_csv;
pub mod engine;
pub mod error;
pub mod model;
pub mod objective;
pub mod param;
pub mod probe;
pub mod rng;

pub use error::{Error, Result};
pub use param::ParamVector;
