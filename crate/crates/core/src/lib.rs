pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scoring;
pub mod training;
