//! Data ingestion, design matrices, result serialization and the `ptw`
//! command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod design;
pub mod report;

pub use cli::run;
