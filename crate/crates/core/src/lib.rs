//! Multi-tenant resource manager for federated learning.
//!
//! Jobs register with the [`job_manager`], which admits them against the
//! observed client population. Clients check in with a sharded
//! [`client_manager`], which binds them to jobs using scores or partitions
//! produced by a pluggable [`scheduler`] policy. The [`data_plane`] moves
//! plans down and aggregated results up a server tree. The [`sim`] module
//! replays client traces through all of it deterministically.

pub mod client_agent;
pub mod client_manager;
pub mod control_plane;
pub mod data_plane;
pub mod domain;
pub mod error;
pub mod job_manager;
pub mod messages;
pub mod scheduler;
pub mod sim;
pub mod store;

pub use client_manager::{AcceptOutcome, Binding, CheckInOutcome, CheckInResponse, ClientManager, TaskOffer};
pub use control_plane::{ControlPlane, ControlPlaneConfig};
pub use data_plane::{Contribution, DataPlane, DataPlaneConfig, ExecPlan, FedAvg, FedAvgState, Reducer};
pub use domain::{AttributeMap, ClientId, ClientInfo, Constraint, JobId, JobRecord, JobSpec, JobState, Query, Seconds};
pub use error::{ApiError, DataPlaneError, DomainError, IncrementRejected, QueryParseError, SimError};
pub use job_manager::{AdmissionConfig, JobManager};
pub use scheduler::{PolicyKind, PolicyPlugin, Scheduler, SchedulingMode};
pub use store::{ClientCache, ClientWindowStore, JobStore};
