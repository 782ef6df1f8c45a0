//! Run metrics, computed from the event log alone.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{ClientId, JobId};
use crate::sim::events::{to_secs, LogRecord, Millis, Mode, RunStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub t: Millis,
    pub client: ClientId,
    pub job: JobId,
    pub round: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Option<Mode>,
    pub status: RunStatus,
    pub num_clients: usize,
    /// First to last event of the run, seconds.
    pub makespan: f64,
    /// Completed-task time over `num_clients * makespan`.
    pub resource_utilization: f64,
    /// Bindings per second of makespan.
    pub throughput: f64,
    /// Mean of submission-to-finish over jobs. For a failed run, unfinished
    /// jobs contribute the time until the run stopped.
    pub avg_jct: f64,
    pub per_job_jct: BTreeMap<JobId, f64>,
    pub unfinished_jobs: Vec<JobId>,
    /// Mean per round of request open to demand met (or request ended).
    pub request_completion_time: f64,
    /// Mean per round of demand met (or request ended) to round result.
    pub execution_completion_time: f64,
    pub failure_rate: f64,
    pub bindings: u64,
    pub tasks_done: u64,
    pub tasks_failed: u64,
    #[serde(skip)]
    pub ledger: Vec<LedgerEntry>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn compute_metrics(log: &[LogRecord]) -> MetricsReport {
    let mut mode = None;
    let mut num_clients = 0usize;
    let mut start: Millis = 0;
    let mut end: Millis = 0;
    let mut status = RunStatus::Failed;
    let mut submitted: BTreeMap<JobId, Millis> = BTreeMap::new();
    let mut finished: BTreeMap<JobId, Millis> = BTreeMap::new();
    let mut round_start: BTreeMap<(JobId, u32), Millis> = BTreeMap::new();
    let mut request_closed: BTreeMap<(JobId, u32), Millis> = BTreeMap::new();
    let mut request_times = Vec::new();
    let mut exec_times = Vec::new();
    let mut busy_ms: u64 = 0;
    let (mut bindings, mut done, mut failed) = (0u64, 0u64, 0u64);
    let mut ledger = Vec::new();

    for rec in log {
        match rec {
            LogRecord::RunStart {
                t,
                mode: m,
                num_clients: n,
                ..
            } => {
                mode = Some(*m);
                num_clients = *n;
                start = *t;
            }
            LogRecord::JobRegister { job, submitted: s, .. } => {
                submitted.insert(*job, *s);
            }
            LogRecord::RoundStart { t, job, round, .. } => {
                round_start.insert((*job, *round), *t);
            }
            LogRecord::Bound { t, client, job, round } => {
                bindings += 1;
                ledger.push(LedgerEntry {
                    t: *t,
                    client: *client,
                    job: *job,
                    round: *round,
                });
            }
            LogRecord::DemandMet { t, job, round } | LogRecord::EndRequest { t, job, round } => {
                let key = (*job, *round);
                if request_closed.contains_key(&key) {
                    continue;
                }
                request_closed.insert(key, *t);
                if let Some(s) = round_start.get(&key) {
                    request_times.push(to_secs(t - s));
                }
            }
            LogRecord::TaskDone { t, start: s, .. } => {
                done += 1;
                busy_ms += t - s;
            }
            LogRecord::TaskFail { .. } => failed += 1,
            LogRecord::RoundEnd { t, job, round, .. } => {
                if let Some(c) = request_closed.get(&(*job, *round)) {
                    exec_times.push(to_secs(t - c));
                }
            }
            LogRecord::JobFinish { t, job } => {
                finished.insert(*job, *t);
            }
            LogRecord::RunEnd { t, status: s, .. } => {
                end = *t;
                status = *s;
            }
            LogRecord::AdmissionRejected { .. } | LogRecord::ClientArrive { .. } | LogRecord::ClientDepart { .. } => {}
        }
    }

    let makespan = to_secs(end.saturating_sub(start));
    let mut per_job_jct = BTreeMap::new();
    let mut unfinished_jobs = Vec::new();
    for (job, s) in &submitted {
        let f = match finished.get(job) {
            Some(f) => *f,
            None => {
                unfinished_jobs.push(*job);
                end
            }
        };
        per_job_jct.insert(*job, to_secs(f.saturating_sub(*s)));
    }
    let jcts: Vec<f64> = per_job_jct.values().copied().collect();
    let denom = num_clients as f64 * makespan;
    MetricsReport {
        mode,
        status,
        num_clients,
        makespan,
        resource_utilization: if denom > 0.0 { to_secs(busy_ms) / denom } else { 0.0 },
        throughput: if makespan > 0.0 { bindings as f64 / makespan } else { 0.0 },
        avg_jct: mean(&jcts),
        per_job_jct,
        unfinished_jobs,
        request_completion_time: mean(&request_times),
        execution_completion_time: mean(&exec_times),
        failure_rate: if done + failed > 0 {
            failed as f64 / (done + failed) as f64
        } else {
            0.0
        },
        bindings,
        tasks_done: done,
        tasks_failed: failed,
        ledger,
    }
}

pub const CSV_HEADER: &str = "mode,status,num_clients,makespan,resource_utilization,throughput,avg_jct,\
request_completion_time,execution_completion_time,failure_rate,bindings,tasks_done,tasks_failed";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode.map_or("", Mode::as_str),
            match self.status {
                RunStatus::Completed => "COMPLETED",
                RunStatus::Failed => "FAILED",
            },
            self.num_clients,
            self.makespan,
            self.resource_utilization,
            self.throughput,
            self.avg_jct,
            self.request_completion_time,
            self.execution_completion_time,
            self.failure_rate,
            self.bindings,
            self.tasks_done,
            self.tasks_failed
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        writeln!(out, "{}", self.csv_row())
    }

    pub fn write_ledger<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_ms,client,job,round")?;
        for e in &self.ledger {
            writeln!(out, "{},{},{},{}", e.t, e.client.0, e.job.0, e.round)?;
        }
        Ok(())
    }

    /// Named scalar metrics, in a fixed order.
    pub fn scalars(&self) -> [(&'static str, f64); 6] {
        [
            ("resource_utilization", self.resource_utilization),
            ("throughput", self.throughput),
            ("avg_jct", self.avg_jct),
            ("request_completion_time", self.request_completion_time),
            ("execution_completion_time", self.execution_completion_time),
            ("failure_rate", self.failure_rate),
        ]
    }
}
