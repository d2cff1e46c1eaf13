//! Data ingestion, synthetic corpus, training loops, cross-validation,
//! metrics and exports behind the command-line front-end.

pub mod config;
pub mod cv;
pub mod data;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod report;
pub mod search;
pub mod toy;
pub mod train;
