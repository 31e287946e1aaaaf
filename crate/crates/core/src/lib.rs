// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numcore;
pub mod chaser;
pub mod estfun;
pub mod ptwdist;
pub mod refdists;
pub mod simstudy;
pub mod tweedie;

#[cfg(test)]
mod testutil;
