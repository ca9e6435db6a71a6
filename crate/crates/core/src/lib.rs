//! fNIRS analysis: raw two-wavelength intensities to hemoglobin series,
//! block-design epochs, cross-participant classification, Shapley channel
//! attribution and group statistics, plus a synthetic cohort generator with
//! known ground truth.
//!
//! Numeric kernels are generic over [`scalar::Real`]; the aliases below fix
//! them to `f64`, which is what the data containers use.

pub mod epochs;
pub mod error;
pub mod explain;
pub mod features;
pub mod io;
pub mod learn;
pub mod model;
pub mod motion;
pub mod optics;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod signal;
pub mod stats;
pub mod svg;
pub mod synth;

pub use error::{Error, Result};

pub type ExtinctionTable = optics::ExtinctionTable<f64>;
pub type MbllSystem = optics::MbllSystem<f64>;
pub type BandpassSpec = signal::BandpassSpec<f64>;
pub type ButterworthBandpass = signal::ButterworthBandpass<f64>;
pub type MotionParams = motion::MotionParams<f64>;
pub type GroupSummary = stats::GroupSummary<f64>;
pub type TestResult = stats::TestResult<f64>;
pub type Hrf = synth::Hrf<f64>;
