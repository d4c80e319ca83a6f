//! Desk-scale lane-following stack.
//!
//! The crate simulates a differential-drive robot on tile-based road maps,
//! renders its camera view under several visual domains, generates expert
//! driving data with a calibrated PD controller, trains a small
//! convolutional policy on that data by behavioral cloning, and evaluates
//! trained policies both offline (regression error) and closed-loop
//! (driving distance before leaving the road).
//!
//! Modules mirror the pipeline stages:
//!
//! * [`simcore`] — road geometry, lane queries, exact drive kinematics
//! * [`render`] — pinhole ground-plane renderer with per-domain appearance
//! * [`preprocess`] — camera frame to network input tensor
//! * [`expert`] — PD lane-following expert and its calibration
//! * [`dataset`] — sample collection, binary dataset format, mixing/splits
//! * [`nn`] — from-scratch tensors, layers, optimizer, gradient checks
//! * [`train`] — behavioral-cloning training loop and seed sweeps
//! * [`eval`] — offline error matrices and closed-loop driving scores
//!
//! All randomness is counter-based (see [`rng`]): every draw is a pure
//! function of a seed, a stream label, and a counter, so each stage is
//! bit-reproducible for a fixed configuration and seed.

pub mod dataset;
pub mod eval;
pub mod expert;
pub mod nn;
pub mod preprocess;
pub mod render;
pub mod rng;
pub mod simcore;
pub mod train;
