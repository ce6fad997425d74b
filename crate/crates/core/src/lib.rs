//! Deterministic discrete-event simulator for device-cloud collaborative
//! computing: a shared pool of logical simulation bundles and phones, a
//! message tier that paces device results toward the cloud, and a cloud tier
//! that averages the models it receives.
//!
//! Everything runs on one virtual clock. Given the same inputs and seed, a
//! run produces byte-identical traces.

pub mod allocation;
pub mod catalog;
pub mod cloud;
pub mod deviceflow;
pub mod emulation;
pub mod engine;
pub mod model;
pub mod platform;
pub mod report;
pub mod scalar;
pub mod scheduler;
pub mod stats;
pub mod time;
pub mod trace;
pub mod workload;

pub use scalar::Scalar;
pub use time::Millis;

/// Model parameters in double precision.
pub type Params = workload::ModelParams<f64>;
/// Training example in double precision.
pub type Example = workload::Example<f64>;
/// Client partition in double precision.
pub type ClientData = workload::ClientDataset<f64>;
