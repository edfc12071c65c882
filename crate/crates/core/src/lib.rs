//! Behavioral simulator of a processing-in-pixel image sensor that computes a
//! first convolution layer during exposure, with analytical rate, power and
//! frame-rate calculators.
//!
//! The simulation chain is
//! [`optics`] (scene to photocurrent) -> [`pixel`] (PWM-weighted charge on
//! spliced FD nodes) -> [`readout`] (column ADC and two-phase subtraction),
//! driven by the step plan from [`scheduler`] and perturbed by [`noise`].
//! [`analysis`] holds the closed-form calculators and the reference
//! convolution; [`sim`] ties everything together.

pub mod analysis;
pub mod config;
pub mod error;
pub mod feature;
pub mod kernel;
pub mod noise;
pub mod optics;
pub mod pixel;
pub mod readout;
pub mod scheduler;
pub mod sim;

pub use config::{ConfigEntries, SensorConfig, ValidatedConfig};
pub use error::{Error, ErrorClass, Result};
pub use feature::FeatureMap;
pub use kernel::{KernelSet, Phase, PhaseWeights, WeightKernel};
pub use noise::NoiseModel;
pub use optics::{PhotocurrentMap, Raster, Scene};
pub use readout::{AdcMode, AdcModel};
pub use scheduler::{Policy, TileSchedule};
