//! Memory-budgeted KV attention cache, toy transformer simulator and
//! experiment harness.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod kvcache;
pub mod numerics;
pub mod parallel;
pub mod planner;
pub mod quant;
pub mod theory;
pub mod toymodel;
pub mod trace;

pub use error::{Error, Result};
