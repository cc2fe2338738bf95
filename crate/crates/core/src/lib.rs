//! Simulation and signal processing for frequency-indexed near-field FMCW
//! sensing with a single RF chain.
//!
//! A clip-on aperture fabric places passive, frequency-selective radiating
//! modules along a shared guided-wave trunk. Each FMCW center frequency
//! activates exactly one module and one position along it, so stepping the
//! chirp center frequency sweeps a virtual aperture. This crate covers the
//! whole chain:
//!
//! ```text
//! schedule ──► fabric ──► echo synthesis ──► range FFT ──► usable states
//!                                                  │
//!                    reference scatterers ──► self-calibration (LM fit)
//!                                                  │
//!                               normalization ──► near-field focusing ──► metrics
//! ```
//!
//! plus the relative link-budget arithmetic used to reason about sensing
//! margin ([`budget`]).
//!
//! All randomness is seeded; identical inputs give bit-identical outputs.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budget;
pub mod calibration;
pub mod dsp;
pub mod echo;
pub mod fabric;
pub mod imaging;
pub mod pipeline;
pub mod presets;
pub mod scenario;
pub mod schedule;

pub use num_complex::Complex64;

/// Three-vector in metres.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub use budget::{BudgetInput, BudgetReport};
pub use calibration::{CalibMeasurement, CalibParams, FitReport, ReferenceScatterer};
pub use dsp::{DopplerProfile, RangeProfile, UsableSet, Window};
pub use echo::{NoiseSpec, RawDataCube, Target};
pub use fabric::{ClipOnModule, FabricConfig, LossComponents, PerturbationState, RippleProfile};
pub use imaging::{FocusedImage, ImageMetrics, ImagingGrid};
pub use scenario::Scenario;
pub use schedule::{Band, ChirpSchedule, ChirpSpec, GuardBudget, Subband, ValidationReport};
