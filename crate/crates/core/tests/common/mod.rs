//! Builders shared by the integration tests.
#![allow(dead_code)]

use fedpool_core::{AttributeMap, ClientId, ClientInfo, Constraint, JobId, JobRecord, JobSpec, JobState};

pub fn record(id: u32, score: f64, time_stamp: f64) -> JobRecord {
    JobRecord {
        job_id: JobId(id),
        time_stamp,
        total_sched: 0.0,
        start_sched: time_stamp,
        job_ip: "10.0.0.1".into(),
        port: 9000,
        total_demand: 10,
        total_round: 2,
        attained_service: 0,
        round: 1,
        demand: 5,
        amount: 0,
        score,
        public_constraint: Constraint::none(),
        private_constraint: Constraint::none(),
        state: JobState::Requesting,
        workload_per_client: 1.0,
    }
}

pub fn attrs(pairs: &[(&str, f64)]) -> AttributeMap {
    AttributeMap::from_pairs(pairs.iter().copied()).expect("valid attributes")
}

pub fn constraint(pairs: &[(&str, f64)]) -> Constraint {
    Constraint::from_pairs(pairs.iter().copied()).expect("valid constraint")
}

pub fn client(id: u64, public: &[(&str, f64)], private: &[(&str, f64)]) -> ClientInfo {
    ClientInfo {
        client_id: ClientId(id),
        public_attrs: attrs(public),
        private_attrs: attrs(private),
        avail_start: 0.0,
        avail_end: 1e9,
        speed: 1.0,
        bandwidth: 1.0,
    }
}

pub fn spec(est_demand: u32, total_round: u32, public: &[(&str, f64)], private: &[(&str, f64)]) -> JobSpec {
    JobSpec {
        total_round,
        est_demand,
        public_constraint: constraint(public),
        private_constraint: constraint(private),
        workload_per_client: 1.0,
    }
}
