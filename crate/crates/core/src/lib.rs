//! Core library for sparse-to-dense point cloud reconstruction.
//!
//! The pipeline turns a dense rotating-scanner frame plus a camera image into
//! a reconstruction dataset and back again: simulate a low-resolution scan,
//! pick query points on it, gather dense ground-truth neighborhoods, train a
//! transformer that predicts a local point group per query, and evaluate the
//! reassembled cloud against the original frame.

pub mod eval;
pub mod geometry;
pub mod io;
pub mod lidar;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod spatial;
pub mod train;
