//! Two-party split learning laboratory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod protect;
pub mod psu;
pub mod splitnn;
pub mod synthdata;

pub use error::{Error, Result};
