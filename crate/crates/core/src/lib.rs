//! Photothermal super-resolution with deep-unfolded block-sparse networks.
//!
//! The crate builds the thermal point spread function of a laser-heated
//! plate, synthesizes structured-illumination measurements, reconstructs
//! defect maps with classical block-sparse solvers or trained unfolded
//! networks, and runs the comparative studies from the command line.

pub mod bench;
pub mod classical;
pub mod commands;
pub mod config;
pub mod conv;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod thermal;
pub mod train;
pub mod unfold;

pub use error::{Error, Result};
