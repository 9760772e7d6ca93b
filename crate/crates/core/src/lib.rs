//! Simulation and super-resolved analysis of 1D lattice fluorescence images.
//!
//! The crate covers the forward model (optics, pixel sampling, EMCCD
//! noise), calibration (noise histograms, response reconstruction,
//! wavefront fits, lattice constant) and the localization pipeline that
//! turns an integrated profile into emitter positions and lattice sites.
//!
//! Positions and widths are in camera pixels (object plane) unless a name
//! says otherwise; signals are in photoelectrons.

pub mod bench;
pub mod config;
pub mod error;
pub mod imaging;
pub mod io;
pub mod localize;
pub mod lsf;
pub mod noise;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod wavefront;

pub use error::{Error, Result};
