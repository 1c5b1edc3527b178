//! File formats, configuration and the `dnsreg` command line on top of
//! [`dnsreg_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod io;
pub mod nifti;
pub mod pipeline;

pub use dnsreg_core as core;
pub use error::{Error, Result};
