//! Documents, ingestion, persistence, rendering and the HTTP service.

pub mod api;
pub mod documents;
pub mod ingest;
pub mod render;
pub mod service;
pub mod store;

pub use service::{ErrorKind, ServiceError, Workbench};
