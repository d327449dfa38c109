//! Incident-surveillance estimation core.
//!
//! Turns incident-report streams into delay-corrected, exposure-normalized,
//! media-adjusted risk signals, detects regimes, and maps them to lifecycle
//! phases.

pub mod agreement;
pub mod delay;
pub mod exposure;
pub mod forecast;
pub mod glm;
pub mod impact;
pub mod ingest;
pub mod model;
pub mod pelt;
pub mod phases;
pub mod sensitivity;
pub mod stats;
pub mod triangulate;

pub use model::{MonthIndex, MonthlyPanel, RiskSeries, SeverityLevel, SeverityScale};
