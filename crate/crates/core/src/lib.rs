// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod io;
pub mod koopman;
pub mod lifting;
pub mod linalg;
pub mod lqr;
pub mod model;
pub mod ocp;
pub mod stability;
pub mod training;

pub use error::{Error, Result};
