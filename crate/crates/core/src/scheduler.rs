//! Scheduling layer: hosts a policy plugin and hands it a restricted view of
//! the job and client databases.
//!
//! Online policies write per-job priority scores into the job store, which
//! client managers read at check-in. Small-batch policies instead split the
//! requesting jobs into [`JobGroup`]s, each with a client query; the latest
//! partition is published on a [`PartitionBoard`] as one atomic snapshot.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Constraint, JobId, JobRecord, JobState, Query, Seconds};
use crate::error::ApiError;
use crate::store::{ClientWindowStore, JobStore};

/// Default cadence of `on_tick` recomputation.
pub const DEFAULT_TICK_SECS: Seconds = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingMode {
    Online,
    SmallBatch,
}

/// Client metadata across every client-manager shard. Statistics are sums
/// over the per-shard windows.
#[derive(Clone, Debug, Default)]
pub struct ClientDb {
    shards: Vec<Arc<ClientWindowStore>>,
}

impl ClientDb {
    pub fn new(shards: Vec<Arc<ClientWindowStore>>) -> Self {
        Self { shards }
    }

    pub fn shards(&self) -> &[Arc<ClientWindowStore>] {
        &self.shards
    }

    pub fn size(&self) -> usize {
        self.shards.iter().map(|s| s.size()).sum()
    }

    pub fn proportion(&self, c: &Constraint) -> f64 {
        let total = self.size();
        if total == 0 {
            return 0.0;
        }
        let hits: usize = self.shards.iter().map(|s| s.count_satisfying(c)).sum();
        hits as f64 / total as f64
    }

    pub fn subset_size(&self, q: &Query) -> usize {
        self.shards.iter().map(|s| s.subset_size(q)).sum()
    }
}

/// Value of a job-database field as seen through [`SchedulerApi::get_field`].
#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Number(f64),
    Text(String),
    Constraint(Constraint),
    State(JobState),
}

impl FieldValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldValue::Number(v) => Some(*v),
            _ => None,
        }
    }
}

/// The calls available to policy plugins. The score is the only field a
/// plugin can write, and only online plugins may write it.
pub struct SchedulerApi<'a> {
    jobs: &'a JobStore,
    clients: &'a ClientDb,
    mode: SchedulingMode,
}

impl<'a> SchedulerApi<'a> {
    pub fn new(jobs: &'a JobStore, clients: &'a ClientDb, mode: SchedulingMode) -> Self {
        Self { jobs, clients, mode }
    }

    pub fn exist(&self, job: JobId) -> bool {
        self.jobs.exists(job)
    }

    pub fn get_job_size(&self) -> usize {
        self.jobs.len()
    }

    pub fn get_field(&self, job: JobId, field: &str) -> Result<FieldValue, ApiError> {
        let rec = self.jobs.get(job).ok_or(ApiError::UnknownJob(job))?;
        Ok(match field {
            "job_ip" => FieldValue::Text(rec.job_ip),
            "state" => FieldValue::State(rec.state),
            "public_constraint" => FieldValue::Constraint(rec.public_constraint),
            "private_constraint" => FieldValue::Constraint(rec.private_constraint),
            other => FieldValue::Number(rec.field(other).ok_or_else(|| ApiError::UnknownField(other.to_string()))?),
        })
    }

    pub fn query(&self, query: &str) -> Result<Vec<JobId>, ApiError> {
        let q: Query = query.parse()?;
        Ok(self.jobs.query(&q))
    }

    pub fn set_score(&self, score: f64, job: JobId) -> Result<(), ApiError> {
        if self.mode != SchedulingMode::Online {
            return Err(ApiError::ScoreWriteForbidden);
        }
        self.jobs.set_score(job, score).ok_or(ApiError::UnknownJob(job))
    }

    pub fn get_client_size(&self) -> usize {
        self.clients.size()
    }

    pub fn get_client_proportion(&self, public_constraint: &Constraint) -> f64 {
        self.clients.proportion(public_constraint)
    }

    pub fn get_client_subset_size(&self, query: &str) -> Result<usize, ApiError> {
        let q: Query = query.parse()?;
        Ok(self.clients.subset_size(&q))
    }

    /// Ids of all jobs currently requesting clients, in rank order.
    pub(crate) fn requesting(&self) -> Vec<JobId> {
        self.jobs
            .ranked(|r| r.state == JobState::Requesting)
            .into_iter()
            .map(|r| r.job_id)
            .collect()
    }

    pub(crate) fn record(&self, job: JobId) -> Option<JobRecord> {
        self.jobs.get(job)
    }
}

/// A set of requesting jobs sharing one client partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobGroup {
    pub group_id: u32,
    /// Intra-group priority, highest first.
    pub members: Vec<JobId>,
    pub client_query: Query,
}

/// A published partition. `epoch` increases with every publication.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub epoch: u64,
    pub groups: Vec<JobGroup>,
}

/// Holds the current partition; readers always see one whole snapshot.
#[derive(Debug, Default)]
pub struct PartitionBoard {
    current: RwLock<Option<Arc<Partition>>>,
}

impl PartitionBoard {
    pub fn publish(&self, groups: Vec<JobGroup>) -> Arc<Partition> {
        let mut slot = self.current.write();
        let epoch = slot.as_ref().map_or(1, |p| p.epoch + 1);
        let partition = Arc::new(Partition { epoch, groups });
        *slot = Some(partition.clone());
        partition
    }

    pub fn current(&self) -> Option<Arc<Partition>> {
        self.current.read().clone()
    }
}

/// A scheduling policy. Implementations declare one mode; online policies
/// express decisions through `set_score`, small-batch policies through
/// `partition`.
pub trait PolicyPlugin: Send {
    fn name(&self) -> &'static str;
    fn mode(&self) -> SchedulingMode;
    fn on_job_register(&mut self, _api: &SchedulerApi<'_>, _job: JobId) {}
    fn on_job_request(&mut self, _api: &SchedulerApi<'_>, _job: JobId) {}
    fn on_tick(&mut self, _api: &SchedulerApi<'_>, _now: Seconds) {}
    fn partition(&mut self, _api: &SchedulerApi<'_>, _jobs: &[JobId]) -> Vec<JobGroup> {
        Vec::new()
    }
}

/// Earlier registrations rank higher.
#[derive(Debug, Default)]
pub struct FifoPolicy;

impl PolicyPlugin for FifoPolicy {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn mode(&self) -> SchedulingMode {
        SchedulingMode::Online
    }

    fn on_job_register(&mut self, api: &SchedulerApi<'_>, job: JobId) {
        if let Ok(FieldValue::Number(ts)) = api.get_field(job, "time_stamp") {
            let _ = api.set_score(-ts, job);
        }
    }
}

/// Fresh uniform score in (0, 1) on every round request.
#[derive(Debug)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PolicyPlugin for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn mode(&self) -> SchedulingMode {
        SchedulingMode::Online
    }

    fn on_job_request(&mut self, api: &SchedulerApi<'_>, job: JobId) {
        let mut u: f64 = self.rng.random();
        while u == 0.0 {
            u = self.rng.random();
        }
        let _ = api.set_score(u, job);
    }
}

/// Jobs whose eligible clients are rarer in the window get priority:
/// score = 1 - proportion of windowed clients meeting the public constraint.
#[derive(Debug, Default)]
pub struct RarityPolicy;

impl RarityPolicy {
    fn rescore(api: &SchedulerApi<'_>, job: JobId) {
        if let Ok(FieldValue::Constraint(c)) = api.get_field(job, "public_constraint") {
            let _ = api.set_score(1.0 - api.get_client_proportion(&c), job);
        }
    }
}

impl PolicyPlugin for RarityPolicy {
    fn name(&self) -> &'static str {
        "rarity"
    }

    fn mode(&self) -> SchedulingMode {
        SchedulingMode::Online
    }

    fn on_job_request(&mut self, api: &SchedulerApi<'_>, job: JobId) {
        Self::rescore(api, job);
    }

    fn on_tick(&mut self, api: &SchedulerApi<'_>, _now: Seconds) {
        for job in api.requesting() {
            Self::rescore(api, job);
        }
    }
}

/// Small-batch fair sharing. Jobs with identical public constraints share a
/// group whose query is that constraint; members are ordered least-served
/// first. Groups are ordered most-constrained first so that scarce clients
/// are offered to the jobs that can only use them.
#[derive(Debug, Default)]
pub struct FairSharePolicy;

impl PolicyPlugin for FairSharePolicy {
    fn name(&self) -> &'static str {
        "fairshare_smallbatch"
    }

    fn mode(&self) -> SchedulingMode {
        SchedulingMode::SmallBatch
    }

    fn partition(&mut self, api: &SchedulerApi<'_>, jobs: &[JobId]) -> Vec<JobGroup> {
        let mut buckets: BTreeMap<String, (Constraint, Vec<JobRecord>)> = BTreeMap::new();
        for &job in jobs {
            let Some(rec) = api.record(job) else { continue };
            let key = rec.public_constraint.signature();
            buckets
                .entry(key)
                .or_insert_with(|| (rec.public_constraint.clone(), Vec::new()))
                .1
                .push(rec);
        }
        let mut groups: Vec<(usize, u64, String, JobGroup)> = buckets
            .into_iter()
            .map(|(key, (constraint, mut recs))| {
                recs.sort_by(|a, b| {
                    a.attained_service
                        .cmp(&b.attained_service)
                        .then(a.time_stamp.total_cmp(&b.time_stamp))
                        .then(a.job_id.cmp(&b.job_id))
                });
                let least = recs[0].attained_service;
                let group = JobGroup {
                    group_id: 0,
                    members: recs.iter().map(|r| r.job_id).collect(),
                    client_query: constraint.to_query(),
                };
                (constraint.len(), least, key, group)
            })
            .collect();
        groups.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        groups
            .into_iter()
            .enumerate()
            .map(|(i, (_, _, _, mut g))| {
                g.group_id = i as u32;
                g
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Fifo,
    Random,
    Rarity,
    FairshareSmallbatch,
}

impl PolicyKind {
    pub fn build(self, seed: u64) -> Box<dyn PolicyPlugin> {
        match self {
            PolicyKind::Fifo => Box::new(FifoPolicy),
            PolicyKind::Random => Box::new(RandomPolicy::new(seed)),
            PolicyKind::Rarity => Box::new(RarityPolicy),
            PolicyKind::FairshareSmallbatch => Box::new(FairSharePolicy),
        }
    }
}

/// Serializes plugin hooks and publishes their results.
pub struct Scheduler {
    jobs: Arc<JobStore>,
    clients: ClientDb,
    mode: SchedulingMode,
    policy: Mutex<Box<dyn PolicyPlugin>>,
    board: PartitionBoard,
}

impl Scheduler {
    pub fn new(jobs: Arc<JobStore>, clients: ClientDb, policy: Box<dyn PolicyPlugin>) -> Self {
        Self {
            jobs,
            clients,
            mode: policy.mode(),
            policy: Mutex::new(policy),
            board: PartitionBoard::default(),
        }
    }

    pub fn mode(&self) -> SchedulingMode {
        self.mode
    }

    pub fn policy_name(&self) -> &'static str {
        self.policy.lock().name()
    }

    pub fn board(&self) -> &PartitionBoard {
        &self.board
    }

    pub fn clients(&self) -> &ClientDb {
        &self.clients
    }

    fn api(&self) -> SchedulerApi<'_> {
        SchedulerApi::new(&self.jobs, &self.clients, self.mode)
    }

    pub fn on_job_register(&self, job: JobId) {
        let api = self.api();
        self.policy.lock().on_job_register(&api, job);
    }

    pub fn on_job_request(&self, job: JobId) {
        let api = self.api();
        self.policy.lock().on_job_request(&api, job);
        if self.mode == SchedulingMode::SmallBatch {
            self.dispatch_partitions();
        }
    }

    pub fn on_job_finish(&self, _job: JobId) {
        if self.mode == SchedulingMode::SmallBatch {
            self.dispatch_partitions();
        }
    }

    pub fn on_tick(&self, now: Seconds) {
        let api = self.api();
        self.policy.lock().on_tick(&api, now);
        if self.mode == SchedulingMode::SmallBatch {
            self.dispatch_partitions();
        }
    }

    /// Re-partitions all requesting jobs and publishes the result. Jobs the
    /// plugin places in more than one group keep only their first placement.
    pub fn dispatch_partitions(&self) -> Arc<Partition> {
        let api = self.api();
        let requesting = api.requesting();
        let mut groups = self.policy.lock().partition(&api, &requesting);
        let mut seen = std::collections::HashSet::new();
        for g in &mut groups {
            g.members.retain(|j| requesting.contains(j) && seen.insert(*j));
        }
        groups.retain(|g| !g.members.is_empty());
        self.board.publish(groups)
    }
}
