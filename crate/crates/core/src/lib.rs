//! Forward modeling and inversion of dc-bias defect spectroscopy on
//! superconducting resonators.
//!
//! Internal quantities are SI throughout. See [`units`] for the boundary
//! conversions used by files and the command line. The [`stats`] module takes
//! dipole lists in Debye, the unit they are reported in.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod optim;
pub mod physics;
pub mod pipeline;
pub mod resonator;
pub mod spectrum;
pub mod stats;
pub mod synth;
pub mod units;

pub use error::{Error, Result};
pub use num_complex;
pub use physics::{ResonatorModel, SweepWindow, TwoLevelSystem};
pub use spectrum::BiasSpectrum;
