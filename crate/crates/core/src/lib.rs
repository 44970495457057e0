#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod controller;
pub mod error;
pub mod grid;
pub mod hierarchy;
pub mod powerflow;
pub mod qp;
pub mod scenarios;

pub use error::{Error, Result};
