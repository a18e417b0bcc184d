//! Locating the sources of poorly damped power-system oscillations from
//! PMU active/reactive power measurements.
//!
//! The pipeline cleans and detrends the channels, finds dominant frequencies
//! in their spectrum, isolates each one with a zero-phase bandpass, fits an
//! EDMD approximation of the Koopman operator and ranks plants by their
//! participation in the matching mode.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod edmd;
pub mod eig;
pub mod error;
pub mod filter;
pub mod ingest;
pub mod modal;
pub mod pipeline;
pub mod spectral;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use ingest::{ChannelKind, ChannelLabel, ChannelSet};
pub use modal::{Aggregation, ModeReport};
pub use pipeline::{analyze, AnalysisConfig, AnalysisReport};
