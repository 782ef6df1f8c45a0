//! Re-verifies run invariants from an event log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::domain::{AttributeMap, ClientId, Constraint, JobId};
use crate::sim::events::{LogRecord, Millis};

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    TimeWentBackwards { index: usize, t: Millis, previous: Millis },
    UnknownJob { index: usize, job: JobId },
    ClientOffline { index: usize, client: ClientId },
    PublicConstraint { index: usize, client: ClientId, job: JobId },
    PrivateConstraint { index: usize, client: ClientId, job: JobId },
    DoubleBinding { index: usize, client: ClientId, job: JobId, round: u32 },
    OverAllocated { job: JobId, round: u32, bound: u32, demand: u32 },
    BusyClientBound { index: usize, client: ClientId },
    UnmatchedTerminal { index: usize, client: ClientId },
    MissingTerminal { client: ClientId, job: JobId, round: u32 },
    NoRunEnd,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            TimeWentBackwards { index, t, previous } => {
                write!(f, "line {}: time {t} precedes {previous}", index + 1)
            }
            UnknownJob { index, job } => write!(f, "line {}: {job} was never registered", index + 1),
            ClientOffline { index, client } => write!(f, "line {}: {client} bound while offline", index + 1),
            PublicConstraint { index, client, job } => {
                write!(f, "line {}: {client} violates public constraint of {job}", index + 1)
            }
            PrivateConstraint { index, client, job } => {
                write!(f, "line {}: {client} violates private constraint of {job}", index + 1)
            }
            DoubleBinding {
                index,
                client,
                job,
                round,
            } => write!(f, "line {}: {client} bound twice to {job} round {round}", index + 1),
            OverAllocated {
                job,
                round,
                bound,
                demand,
            } => write!(f, "{job} round {round}: {bound} bindings exceed demand {demand}"),
            BusyClientBound { index, client } => write!(f, "line {}: {client} bound while busy", index + 1),
            UnmatchedTerminal { index, client } => {
                write!(f, "line {}: task end for {client} without a binding", index + 1)
            }
            MissingTerminal { client, job, round } => {
                write!(f, "{client} bound to {job} round {round} never finished or failed")
            }
            NoRunEnd => write!(f, "log has no RUN_END record"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AuditReport {
    pub records: usize,
    pub bindings: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct JobInfo {
    public: Constraint,
    private: Constraint,
}

pub fn audit(log: &[LogRecord]) -> AuditReport {
    let mut report = AuditReport {
        records: log.len(),
        ..AuditReport::default()
    };
    let v = &mut report.violations;
    let mut jobs: BTreeMap<JobId, JobInfo> = BTreeMap::new();
    let mut online: BTreeMap<ClientId, (AttributeMap, AttributeMap)> = BTreeMap::new();
    let mut demand: BTreeMap<(JobId, u32), u32> = BTreeMap::new();
    let mut bound: BTreeMap<(JobId, u32), u32> = BTreeMap::new();
    let mut served: BTreeSet<(ClientId, JobId, u32)> = BTreeSet::new();
    let mut active: BTreeMap<ClientId, (JobId, u32)> = BTreeMap::new();
    let mut last: Millis = 0;
    let mut ended = false;

    for (index, rec) in log.iter().enumerate() {
        let t = rec.time();
        if t < last {
            v.push(Violation::TimeWentBackwards {
                index,
                t,
                previous: last,
            });
        }
        last = last.max(t);
        match rec {
            LogRecord::JobRegister {
                job,
                public_constraint,
                private_constraint,
                ..
            } => {
                jobs.insert(
                    *job,
                    JobInfo {
                        public: public_constraint.clone(),
                        private: private_constraint.clone(),
                    },
                );
            }
            LogRecord::ClientArrive {
                client,
                public_attrs,
                private_attrs,
                ..
            } => {
                online.insert(*client, (public_attrs.clone(), private_attrs.clone()));
            }
            LogRecord::ClientDepart { client, .. } => {
                online.remove(client);
            }
            LogRecord::RoundStart { job, round, demand: d, .. } => {
                if !jobs.contains_key(job) {
                    v.push(Violation::UnknownJob { index, job: *job });
                }
                demand.insert((*job, *round), *d);
            }
            LogRecord::Bound { client, job, round, .. } => {
                report.bindings += 1;
                let Some(info) = jobs.get(job) else {
                    v.push(Violation::UnknownJob { index, job: *job });
                    continue;
                };
                match online.get(client) {
                    None => v.push(Violation::ClientOffline { index, client: *client }),
                    Some((public, private)) => {
                        if !info.public.is_satisfied_by(public) {
                            v.push(Violation::PublicConstraint {
                                index,
                                client: *client,
                                job: *job,
                            });
                        }
                        if !info.private.is_satisfied_by(private) {
                            v.push(Violation::PrivateConstraint {
                                index,
                                client: *client,
                                job: *job,
                            });
                        }
                    }
                }
                if !served.insert((*client, *job, *round)) {
                    v.push(Violation::DoubleBinding {
                        index,
                        client: *client,
                        job: *job,
                        round: *round,
                    });
                }
                if active.insert(*client, (*job, *round)).is_some() {
                    v.push(Violation::BusyClientBound { index, client: *client });
                }
                *bound.entry((*job, *round)).or_default() += 1;
            }
            LogRecord::TaskDone { client, job, round, .. } | LogRecord::TaskFail { client, job, round, .. } => {
                if active.get(client) == Some(&(*job, *round)) {
                    active.remove(client);
                } else {
                    v.push(Violation::UnmatchedTerminal { index, client: *client });
                }
            }
            LogRecord::RunEnd { .. } => ended = true,
            _ => {}
        }
    }
    for ((job, round), n) in &bound {
        let d = demand.get(&(*job, *round)).copied().unwrap_or(0);
        if *n > d {
            v.push(Violation::OverAllocated {
                job: *job,
                round: *round,
                bound: *n,
                demand: d,
            });
        }
    }
    for (client, (job, round)) in active {
        v.push(Violation::MissingTerminal { client, job, round });
    }
    if !ended {
        v.push(Violation::NoRunEnd);
    }
    report
}
