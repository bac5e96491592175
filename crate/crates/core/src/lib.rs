#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod camera;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod grid;
pub mod losses;
mod math;
pub mod nets;
pub mod se3;
pub mod solver;
pub mod synthetic;
pub mod warp;

pub use error::{Error, Result};
