//! Passive device fingerprinting from TCP/IPv4 packet headers.
//!
//! The pipeline: [`ingest`] reads captures into per-packet records,
//! [`fingerprint`] turns each device's stream into 4-feature instances
//! (mean and population σ of IP total length and TCP window over windows
//! of five consecutive packets), [`dataset`] splits and relabels them,
//! [`forest`] trains a seeded random forest, and [`eval`] scores it.

pub mod dataset;
pub mod device_map;
pub mod eval;
pub mod fingerprint;
pub mod forest;
pub mod ingest;
pub mod mac;
pub mod numfmt;
pub mod rng;

pub use dataset::{CategoryMap, Dataset, SplitSpec};
pub use fingerprint::{ExtractionConfig, Fingerprint, LabeledInstance};
pub use forest::{ForestParams, RandomForest};
pub use ingest::{CaptureStats, PacketRecord};
pub use mac::MacAddress;
