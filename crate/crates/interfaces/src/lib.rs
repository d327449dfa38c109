//! Operational shell around the estimation core: JSON run configuration,
//! the staged pipeline, content-addressed run storage, meta-reporting cards,
//! analyst declarations and the HTTP service.

pub mod card;
pub mod config;
pub mod declaration;
pub mod pipeline;
pub mod server;
pub mod store;
pub mod synth;

pub use card::{emit_card, render_text, MetaReportCard};
pub use config::{PipelineConfig, Stage};
pub use declaration::ExpertDeclaration;
pub use store::{RunManifest, RunStatus, RunStore};
