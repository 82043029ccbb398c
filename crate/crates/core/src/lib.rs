//! Benchmark engine for short-term spatio-temporal forecasting over sensor
//! networks.
//!
//! The pipeline: [`timeseries`] ingests and aligns sensor panels,
//! [`spatial`] picks node subsets, [`graph`] builds redundancy-controlled
//! correlation graphs, [`models`] fits forecasters on the [`tensor`]
//! autodiff engine, [`ensemble`] spatialises univariate black-box
//! forecasters, and [`bench`] runs the experiment grid.

pub mod bench;
pub mod ensemble;
pub mod graph;
pub mod models;
pub mod spatial;
pub mod tensor;
pub mod timeseries;
