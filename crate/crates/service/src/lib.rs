//! HTTP and server-sent-event boundary over teaching sessions.
//!
//! Every route takes and returns JSON; images travel as base64 PNG. The
//! event stream at `GET /sessions/{id}/events` sends `{seq, type, payload}`
//! envelopes and resumes from `?last_seq=` or `Last-Event-ID`.

pub mod app;
pub mod bundle;
pub mod events;
pub mod jobs;

pub use app::{router, serve, ApiError, AppState, Models, ServiceConfig, Shared};
pub use bundle::{export_bundle, import_bundle, ExportBundle};
pub use events::{Envelope, EventHub, Subscription};
pub use jobs::{JobKind, JobStatus, TrainingJob};
