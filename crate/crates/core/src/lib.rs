// `!(x > 0.0)` is the house idiom for rejecting NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model_io;
pub mod scaling;
pub mod slicer;
pub mod trainer;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};
