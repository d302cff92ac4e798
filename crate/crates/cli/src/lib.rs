//! Experiment orchestration for the core library: config handling, the
//! method grid, dataset file formats, metric reports, and sliding-window
//! heatmaps. The `evicore` binary is a thin command dispatcher over this.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod heatmap;
pub mod methods;
