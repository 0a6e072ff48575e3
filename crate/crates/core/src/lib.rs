//! Triple-pathway cross-modal alignment for text-to-person retrieval.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and a
//! reverse-mode tape, [`encoders`] the toy dual encoders, [`imr`], [`cmr`]
//! and [`dcc`] the three alignment pathways, [`evalret`] retrieval metrics and
//! [`harness`] data generation, optimization and experiments.

pub mod dcc;
pub mod encoders;
pub mod error;
pub mod evalret;
pub mod cmr;
pub mod harness;
pub mod imr;
mod io;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};
