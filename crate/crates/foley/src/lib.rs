//! Files, reports and the `foley` command line around [`foley_core`].

pub mod caft;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::{FoleyError, Result};
