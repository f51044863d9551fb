pub mod config;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod tasks;
