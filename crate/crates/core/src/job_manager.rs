//! Application layer: job registration with admission control, and the
//! round lifecycle REGISTERED → (REQUESTING ↔ EXECUTING)* → FINISHED.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{JobId, JobRecord, JobSpec, JobState, Seconds};
use crate::scheduler::{ClientDb, Scheduler};
use crate::store::JobStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmissionConfig {
    /// Admission cap as a fraction of the current client-window size.
    pub cap_fraction: f64,
    /// While the window is empty and the manager is younger than this, every
    /// job is admitted.
    pub grace_secs: Seconds,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self {
            cap_fraction: 0.25,
            grace_secs: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResult {
    pub ack: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
}

pub struct JobManager {
    jobs: Arc<JobStore>,
    clients: ClientDb,
    scheduler: Arc<Scheduler>,
    admission: AdmissionConfig,
    started_at: Seconds,
    next_id: AtomicU32,
}

impl JobManager {
    pub fn new(
        jobs: Arc<JobStore>,
        clients: ClientDb,
        scheduler: Arc<Scheduler>,
        admission: AdmissionConfig,
        started_at: Seconds,
    ) -> Self {
        Self {
            jobs,
            clients,
            scheduler,
            admission,
            started_at,
            next_id: AtomicU32::new(1),
        }
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.jobs
    }

    /// Largest `est_demand` admitted right now; `None` during bootstrap grace.
    pub fn admission_cap(&self, now: Seconds) -> Option<f64> {
        let size = self.clients.size();
        if size == 0 && now - self.started_at < self.admission.grace_secs {
            None
        } else {
            Some(self.admission.cap_fraction * size as f64)
        }
    }

    pub fn job_regist(&self, spec: &JobSpec, job_ip: &str, port: u16, now: Seconds) -> RegisterResult {
        let rejected = RegisterResult { ack: false, job_id: None };
        if spec.validate().is_err() {
            return rejected;
        }
        if let Some(cap) = self.admission_cap(now) {
            if f64::from(spec.est_demand) > cap {
                return rejected;
            }
        }
        let job_id = JobId(self.next_id.fetch_add(1, Ordering::Relaxed));
        self.jobs.put(JobRecord {
            job_id,
            time_stamp: now,
            total_sched: 0.0,
            start_sched: now,
            job_ip: job_ip.to_string(),
            port,
            total_demand: u64::from(spec.est_demand) * u64::from(spec.total_round),
            total_round: spec.total_round,
            attained_service: 0,
            round: 0,
            demand: 0,
            amount: 0,
            score: 0.0,
            public_constraint: spec.public_constraint.clone(),
            private_constraint: spec.private_constraint.clone(),
            state: JobState::Registered,
            workload_per_client: spec.workload_per_client,
        });
        self.scheduler.on_job_register(job_id);
        RegisterResult {
            ack: true,
            job_id: Some(job_id),
        }
    }

    /// Opens the next round. Returns the new round number on success.
    pub fn job_request(&self, job: JobId, demand: u32, now: Seconds) -> Option<u32> {
        if demand == 0 {
            return None;
        }
        let round = self.jobs.update(job, |r| {
            let open = matches!(r.state, JobState::Registered | JobState::Executing);
            if !open || r.round >= r.total_round {
                return None;
            }
            r.round += 1;
            r.demand = demand;
            r.amount = 0;
            r.start_sched = now;
            r.state = JobState::Requesting;
            Some(r.round)
        })??;
        self.scheduler.on_job_request(job);
        Some(round)
    }

    fn close_request(&self, job: JobId, now: Seconds, require_met: bool) -> bool {
        self.jobs
            .update(job, |r| {
                if r.state != JobState::Requesting || (require_met && r.amount < r.demand) {
                    return false;
                }
                r.state = JobState::Executing;
                r.total_sched += now - r.start_sched;
                r.attained_service += u64::from(r.amount);
                true
            })
            .unwrap_or(false)
    }

    /// Closes the current request early, keeping whatever was allocated.
    pub fn job_end_request(&self, job: JobId, now: Seconds) -> bool {
        self.close_request(job, now, false)
    }

    /// Server-side transition once the allocation counter reached demand.
    pub fn demand_met(&self, job: JobId, now: Seconds) -> bool {
        self.close_request(job, now, true)
    }

    pub fn job_finish(&self, job: JobId, now: Seconds) -> bool {
        let ok = self
            .jobs
            .update(job, |r| {
                if r.state == JobState::Finished {
                    return false;
                }
                if r.state == JobState::Requesting {
                    r.total_sched += now - r.start_sched;
                    r.attained_service += u64::from(r.amount);
                }
                r.state = JobState::Finished;
                true
            })
            .unwrap_or(false);
        if ok {
            self.scheduler.on_job_finish(job);
        }
        ok
    }
}
