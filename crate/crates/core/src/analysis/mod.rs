//! Complexity formulas, MAC counting and segmentation metrics.

pub mod complexity;
pub mod macs;
pub mod metrics;
pub mod report;
