//! Calibration-free classification of blood-pressure changes (Spike /
//! Stable / Dip) from pairs of photoplethysmogram segments.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod fiducials;
pub mod filter;
pub mod io;
pub mod labeling;
pub mod models;
pub mod nn;
pub mod signal;
pub mod synth;
pub mod train;
