// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod deam;
pub mod error;
pub mod geometry;
pub mod ifbp;
pub mod image;
pub mod io;
pub mod objective;
pub mod phantom;
pub mod pipeline;
pub mod spectral;
pub mod spr;

pub use error::{Error, Result};
