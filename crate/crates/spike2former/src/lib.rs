//! Command-line front end, file formats, synthetic data and training
//! drivers for `spike2former-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod run;
