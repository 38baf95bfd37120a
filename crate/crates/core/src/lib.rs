#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod bfgs;
pub mod correspondence;
pub mod decomposition;
pub mod deformation;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod projection;
pub mod registration;
pub mod skeleton;
pub mod synthetic;
pub mod thinning;
pub mod tps;

pub use error::{Error, Result, Stage};
