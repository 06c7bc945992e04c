pub mod config;
pub mod consistency;
pub mod data;
pub mod distill;
pub mod error;
pub mod flowmap;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod samplers;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
