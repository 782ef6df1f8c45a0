//! Deterministic discrete-event simulation of clients, jobs, the control
//! plane and the data plane, plus the comparison baselines and metrics.

pub mod audit;
pub mod baselines;
pub mod config;
pub mod engine;
pub mod events;
pub mod metrics;
pub mod trace;

pub use audit::{audit, AuditReport, Violation};
pub use config::ExperimentConfig;
pub use engine::{run, RunOutput, RunStats};
pub use events::{LogRecord, Mode, RunStatus};
pub use metrics::{compute_metrics, MetricsReport};
pub use trace::{generate, read_trace, write_trace, TraceGenConfig, TraceRecord};
