//! Gain statistics for single-carrier avalanche photodiode multiplication:
//! the McIntyre distribution, a branching-process Monte Carlo oracle,
//! pulse-height spectra and the fits that recover `k` and `M` from them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod avalanche;
pub mod constants;
pub mod error;
pub mod gain;
pub mod inference;
pub mod ingest;
pub mod optimize;
pub mod rng;
pub mod spectrum;

pub use avalanche::{AvalancheConfig, McRun};
pub use error::{Error, Result};
pub use gain::{GainDistribution, McIntyreParams, Origin, TruncationPolicy};
pub use inference::{EnfPoint, FitResult, FreeParam, GainCurvePoint};
pub use ingest::{PulseTiming, Readout, TraceRecord};
pub use spectrum::{Binning, DeviceModel, Histogram, Preset, PulseRecord};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
