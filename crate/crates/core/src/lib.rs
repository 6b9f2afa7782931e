#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod reprogram;
pub mod scenario;
pub mod training;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
