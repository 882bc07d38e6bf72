//! Compute-shift compiler and virtual inter-core chip simulator.

pub mod dense;
pub mod costmodel;
pub mod error;
pub mod interop;
pub mod artifacts;
pub mod chipsim;
pub mod plangen;
pub mod rtensor;
pub mod texpr;

pub use error::{Error, Result};
