//! Semi-batch microalgae bioreactor case study and its offline pipeline.

pub mod artifacts;
pub mod closed_loop;
pub mod cross_validation;
pub mod dataset;
pub mod model;
pub mod pipeline;
pub mod plant;
pub mod report;
pub mod scenario;
pub mod stats;
