//! Discrete-event simulator for a glidein overlay batch system expanded onto
//! spot cloud capacity behind a caching data layer.

pub mod cdn;
pub mod cloud;
pub mod config;
pub mod kernel;
pub mod output;
pub mod pool;
pub mod scenario;
pub mod wms;
pub mod workload;
