// `!(x > 0.0)` is used on purpose: it rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod generate;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;
pub mod vq;
