//! Flood-prediction toolkit: a well-balanced shallow-water solver on raster
//! grids, synthetic scenario and dataset generation, convolutional surrogate
//! models trained from scratch, a Kalman-style measurement update for
//! correcting surrogate rollouts, and an evaluation harness.

pub mod assim;
pub mod config;
pub mod eval;
pub mod field;
pub mod nn;
pub mod scenario;
pub mod solver;
