//! Tracked 4D contrast-enhanced ultrasound workbench.
//!
//! Optical-tracking navigation maths, a synthetic contrast phantom with
//! disruption-replenishment kinetics, the perfusion quantification pipeline,
//! pose-based 4D re-alignment, repeatability statistics and a binary session
//! protocol with record/replay.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod motionsim;
pub mod phantom;
pub mod quant;
pub mod realign;
pub mod stream;

pub use error::{Error, Result};
