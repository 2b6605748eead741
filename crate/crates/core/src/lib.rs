#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod dec;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vat;

pub use error::{Error, Result};
pub use tensor::Matrix;
