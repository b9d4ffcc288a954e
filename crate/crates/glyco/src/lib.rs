//! Glucose forecasting toolkit.

pub mod checkpoint;
pub mod cli;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod kalman;
pub mod nn;
pub mod synth;
pub mod train;
