//! Simulation, estimation and bound computation for RIS-assisted near-field
//! OFDM localization under carrier frequency offset and phase noise.

pub mod config;
pub mod estimator;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod hcrlb;
pub mod ris;
pub mod sdp;
pub mod signal;

pub use config::ScenarioConfig;
pub use error::{Error, Result};
pub use geometry::{PolarPosition, Position3, RisGeometry};
