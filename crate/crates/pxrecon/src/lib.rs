//! File formats, rendering, dataset generation, experiment runners and the
//! command-line front end for `pxrecon-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod png16;
pub mod render;
pub mod run;
pub mod rvol;
pub mod table;

pub use error::{Error, Result};
