//! Transport-agnostic request/response schemas. The reference encoding is
//! JSON with a `type` tag naming the endpoint.

use serde::{Deserialize, Serialize};

use crate::client_manager::{RejectReason, TaskOffer, TaskStatus};
use crate::data_plane::FedAvgState;
use crate::domain::{AttributeMap, ClientId, Constraint, JobId};

/// Requests from job frameworks to the job manager.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobMessage {
    JobRegist {
        total_round: u32,
        est_demand: u32,
        public_constraint: Constraint,
        private_constraint: Constraint,
        job_ip: String,
        port: u16,
    },
    JobRequest {
        job_id: JobId,
        demand: u32,
    },
    JobEndRequest {
        job_id: JobId,
    },
    JobFinish {
        job_id: JobId,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JobReply {
    Regist {
        ack: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        job_id: Option<JobId>,
    },
    Ack {
        ack: bool,
    },
}

/// Requests from client agents to a client manager.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClientMessage {
    ClientCheckin { client_id: ClientId, public_attrs: AttributeMap },
    ClientAccept { client_id: ClientId, job_id: JobId },
    ClientPing { client_id: ClientId },
}

/// An offer as it travels to the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfferMsg {
    pub job_id: JobId,
    pub job_ip: String,
    pub port: u16,
    pub round: u32,
    pub private_constraint: Constraint,
}

impl From<&TaskOffer> for OfferMsg {
    fn from(o: &TaskOffer) -> Self {
        Self {
            job_id: o.job_id,
            job_ip: o.job_ip.clone(),
            port: o.port,
            round: o.round,
            private_constraint: o.private_constraint.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AcceptStatus {
    Bound,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientReply {
    Checkin {
        offers: Vec<OfferMsg>,
    },
    Accept {
        status: AcceptStatus,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        job_ip: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        port: Option<u16>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        reason: Option<RejectReason>,
    },
    Ping {
        task_status: TaskStatus,
    },
}

/// One partially aggregated entry carried by a FLUSH.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlushEntry {
    pub job_id: JobId,
    pub round: u32,
    pub state: FedAvgState,
}

/// Data-plane messages. FETCH_PLAN and UPLOAD are addressed to a leaf;
/// FLUSH travels from a node to its parent; PUBLISH_PLAN and GET_RESULT are
/// the job framework's calls at the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataMessage {
    FetchPlan { job_id: JobId, round: u32 },
    Upload { job_id: JobId, round: u32, vector: Vec<f64>, weight: f64 },
    Flush { entries: Vec<FlushEntry> },
    PublishPlan { job_id: JobId, round: u32, payload: Vec<f64> },
    GetResult { job_id: JobId, round: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataStatus {
    Ok,
    NotReady,
    StaleRound,
    Late,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataReply {
    // first, so its required `count` tells it apart when decoding
    Result {
        status: DataStatus,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        vector: Option<Vec<f64>>,
        count: u64,
    },
    Plan {
        status: DataStatus,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        payload: Option<Vec<f64>>,
    },
    Status {
        status: DataStatus,
    },
}
