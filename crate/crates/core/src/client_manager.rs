//! Binding layer. A client manager shard takes client check-ins, records
//! them in its window, picks candidate tasks from the published scores or
//! partition, and commits bindings through the job store's allocation
//! counters.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::domain::{AttributeMap, ClientId, ClientInfo, Constraint, JobId, JobRecord, JobState, Seconds};
use crate::job_manager::JobManager;
use crate::scheduler::{Partition, Scheduler, SchedulingMode};
use crate::store::{CacheEntry, ClientCache, ClientWindowStore, JobStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientManagerConfig {
    /// Offers per check-in.
    pub offers_per_checkin: usize,
    /// How long an offer can be accepted.
    pub offer_validity: Seconds,
}

impl Default for ClientManagerConfig {
    fn default() -> Self {
        Self {
            offers_per_checkin: 3,
            offer_validity: 10.0,
        }
    }
}

/// Job metadata handed to a client for its local binding decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOffer {
    pub job_id: JobId,
    pub job_ip: String,
    pub port: u16,
    pub round: u32,
    pub private_constraint: Constraint,
    pub workload_per_client: f64,
}

impl TaskOffer {
    fn from_record(r: &JobRecord) -> Self {
        Self {
            job_id: r.job_id,
            job_ip: r.job_ip.clone(),
            port: r.port,
            round: r.round,
            private_constraint: r.private_constraint.clone(),
            workload_per_client: r.workload_per_client,
        }
    }
}

/// Offers in descending priority, at most one per job.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckInResponse {
    pub offers: Vec<TaskOffer>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckInOutcome {
    Offers(CheckInResponse),
    /// Small-batch mode: the client waits in the cache for a partition match.
    Cached { expiry: Seconds },
    /// The check-in fell outside the client's availability interval.
    Unavailable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    NoOffer,
    OfferExpired,
    RoundChanged,
    AlreadyServed,
    ClientBusy,
    Saturated,
    NotRequesting,
    UnknownJob,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AcceptOutcome {
    Bound {
        job_ip: String,
        port: u16,
        round: u32,
        /// This binding filled the round; the job moved to EXECUTING.
        demand_met: bool,
    },
    Rejected(RejectReason),
}

impl AcceptOutcome {
    pub fn is_bound(&self) -> bool {
        matches!(self, AcceptOutcome::Bound { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub client_id: ClientId,
    pub job_id: JobId,
    pub round: u32,
    pub time: Seconds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "state")]
pub enum TaskStatus {
    Idle,
    Waiting,
    Busy { job_id: JobId, round: u32 },
}

#[derive(Clone, Copy, Debug)]
struct PendingOffer {
    job_id: JobId,
    round: u32,
    expires: Seconds,
}

#[derive(Debug, Default)]
struct ShardState {
    offers: HashMap<ClientId, Vec<PendingOffer>>,
    active: HashMap<ClientId, (JobId, u32)>,
    // clients already bound to the given round of a job
    served: HashMap<JobId, (u32, HashSet<ClientId>)>,
    ledger: Vec<Binding>,
}

impl ShardState {
    fn has_served(&self, job: JobId, round: u32, client: ClientId) -> bool {
        self.served
            .get(&job)
            .is_some_and(|(r, set)| *r == round && set.contains(&client))
    }
}

/// One client-manager shard. Its window and cache hold only the clients
/// routed to it; the job store is shared by all shards.
pub struct ClientManager {
    shard: usize,
    config: ClientManagerConfig,
    jobs: Arc<JobStore>,
    job_manager: Arc<JobManager>,
    scheduler: Arc<Scheduler>,
    window: Arc<ClientWindowStore>,
    cache: ClientCache,
    state: Mutex<ShardState>,
}

impl ClientManager {
    pub fn new(
        shard: usize,
        config: ClientManagerConfig,
        job_manager: Arc<JobManager>,
        scheduler: Arc<Scheduler>,
        window: Arc<ClientWindowStore>,
        cache: ClientCache,
    ) -> Self {
        Self {
            shard,
            config,
            jobs: job_manager.store().clone(),
            job_manager,
            scheduler,
            window,
            cache,
            state: Mutex::new(ShardState::default()),
        }
    }

    pub fn shard(&self) -> usize {
        self.shard
    }

    pub fn window(&self) -> &Arc<ClientWindowStore> {
        &self.window
    }

    pub fn cache(&self) -> &ClientCache {
        &self.cache
    }

    /// Check-in guarded by the client's availability interval. Only the
    /// public view of `info` is retained.
    pub fn client_checkin(&self, info: &ClientInfo, now: Seconds) -> CheckInOutcome {
        if !info.is_available_at(now) {
            return CheckInOutcome::Unavailable;
        }
        let mut public = info.clone();
        public.private_attrs = AttributeMap::new();
        self.check_in(public, now)
    }

    /// Check-in from the wire: only id and public attributes are known.
    pub fn check_in_public(&self, client_id: ClientId, public_attrs: AttributeMap, now: Seconds) -> CheckInOutcome {
        let info = ClientInfo {
            client_id,
            public_attrs,
            private_attrs: AttributeMap::new(),
            avail_start: now,
            avail_end: f64::INFINITY,
            speed: 1.0,
            bandwidth: 1.0,
        };
        self.check_in(info, now)
    }

    fn check_in(&self, info: ClientInfo, now: Seconds) -> CheckInOutcome {
        self.window.evict(now);
        let client_id = info.client_id;
        let attrs = info.public_attrs.clone();
        self.window.insert(now, info);
        let batch = self.scheduler.mode() == SchedulingMode::SmallBatch && self.scheduler.board().current().is_some();
        if batch {
            self.cache.push_client(client_id, attrs, now);
            return CheckInOutcome::Cached {
                expiry: now + self.cache.ttl(),
            };
        }
        CheckInOutcome::Offers(self.online_offers(client_id, &attrs, now))
    }

    /// Top-k requesting jobs by score that the client is eligible for.
    fn online_offers(&self, client: ClientId, attrs: &AttributeMap, now: Seconds) -> CheckInResponse {
        let mut state = self.state.lock();
        let k = self.config.offers_per_checkin;
        let offers: Vec<TaskOffer> = self
            .jobs
            .ranked(|r| r.has_open_slots() && r.public_constraint.is_satisfied_by(attrs))
            .iter()
            .filter(|r| !state.has_served(r.job_id, r.round, client))
            .take(k)
            .map(TaskOffer::from_record)
            .collect();
        self.remember(&mut state, client, &offers, now);
        CheckInResponse { offers }
    }

    fn remember(&self, state: &mut ShardState, client: ClientId, offers: &[TaskOffer], now: Seconds) {
        let expires = now + self.config.offer_validity;
        let pending = offers
            .iter()
            .map(|o| PendingOffer {
                job_id: o.job_id,
                round: o.round,
                expires,
            })
            .collect::<Vec<_>>();
        if pending.is_empty() {
            state.offers.remove(&client);
        } else {
            state.offers.insert(client, pending);
        }
    }

    /// Commits `client` to `job` if it holds a live offer and a slot remains.
    pub fn client_accept(&self, client: ClientId, job: JobId, now: Seconds) -> AcceptOutcome {
        use AcceptOutcome::Rejected;
        let mut state = self.state.lock();
        let Some(offer) = state
            .offers
            .get(&client)
            .and_then(|v| v.iter().find(|o| o.job_id == job).copied())
        else {
            return Rejected(RejectReason::NoOffer);
        };
        if now > offer.expires {
            return Rejected(RejectReason::OfferExpired);
        }
        if state.active.contains_key(&client) {
            return Rejected(RejectReason::ClientBusy);
        }
        if state.has_served(job, offer.round, client) {
            return Rejected(RejectReason::AlreadyServed);
        }
        let Some(rec) = self.jobs.get(job) else {
            return Rejected(RejectReason::UnknownJob);
        };
        if rec.round != offer.round {
            return Rejected(RejectReason::RoundChanged);
        }
        let amount = match self.jobs.increment_amount(job) {
            Ok(a) => a,
            Err(crate::error::IncrementRejected::Saturated(_)) => return Rejected(RejectReason::Saturated),
            Err(crate::error::IncrementRejected::NotRequesting(_)) => return Rejected(RejectReason::NotRequesting),
            Err(crate::error::IncrementRejected::UnknownJob(_)) => return Rejected(RejectReason::UnknownJob),
        };
        // the counter is per round, so a concurrent round change cannot
        // slip between the round check above and the increment
        let demand_met = amount >= rec.demand && self.job_manager.demand_met(job, now);
        state.offers.remove(&client);
        state.active.insert(client, (job, rec.round));
        let entry = state.served.entry(job).or_insert_with(|| (rec.round, HashSet::new()));
        if entry.0 != rec.round {
            *entry = (rec.round, HashSet::new());
        }
        entry.1.insert(client);
        state.ledger.push(Binding {
            client_id: client,
            job_id: job,
            round: rec.round,
            time: now,
        });
        AcceptOutcome::Bound {
            job_ip: rec.job_ip,
            port: rec.port,
            round: rec.round,
            demand_met,
        }
    }

    /// Marks the client's task as finished (completed, failed or aborted).
    pub fn task_finished(&self, client: ClientId) -> bool {
        self.state.lock().active.remove(&client).is_some()
    }

    pub fn client_ping(&self, client: ClientId) -> TaskStatus {
        let state = self.state.lock();
        if let Some((job_id, round)) = state.active.get(&client) {
            return TaskStatus::Busy {
                job_id: *job_id,
                round: *round,
            };
        }
        if self.cache.contains(client) || state.offers.contains_key(&client) {
            TaskStatus::Waiting
        } else {
            TaskStatus::Idle
        }
    }

    /// Serves the cached clients of this shard against a published partition.
    /// Each returned response leads with the member the client was assigned
    /// to, followed by other open members of its group that it is eligible
    /// for. Clients that no member can use go back into the cache.
    pub fn serve_partition(&self, partition: &Partition, now: Seconds) -> Vec<(ClientId, CheckInResponse)> {
        let mut out = Vec::new();
        let mut state = self.state.lock();
        for group in &partition.groups {
            let mut members: Vec<(JobRecord, u32)> = group
                .members
                .iter()
                .filter_map(|j| self.jobs.get(*j))
                .filter(|r| r.has_open_slots())
                .map(|r| {
                    let need = r.demand - r.amount;
                    (r, need)
                })
                .collect();
            let total_need: u32 = members.iter().map(|(_, n)| *n).sum();
            if total_need == 0 {
                continue;
            }
            let taken = self.cache.take_matching(&group.client_query, total_need as usize, now);
            let mut leftovers: Vec<CacheEntry> = Vec::new();
            let mut cursor = 0usize;
            for entry in taken {
                let n = members.len();
                let pick = (0..n).map(|i| (cursor + i) % n).find(|&i| {
                    let (rec, need) = &members[i];
                    *need > 0
                        && rec.public_constraint.is_satisfied_by(&entry.public_attrs)
                        && !state.has_served(rec.job_id, rec.round, entry.client_id)
                });
                let Some(i) = pick else {
                    leftovers.push(entry);
                    continue;
                };
                members[i].1 -= 1;
                cursor = (i + 1) % n;
                let mut offers = vec![TaskOffer::from_record(&members[i].0)];
                for (j, (rec, _)) in members.iter().enumerate() {
                    if offers.len() >= self.config.offers_per_checkin {
                        break;
                    }
                    if j != i
                        && rec.public_constraint.is_satisfied_by(&entry.public_attrs)
                        && !state.has_served(rec.job_id, rec.round, entry.client_id)
                    {
                        offers.push(TaskOffer::from_record(rec));
                    }
                }
                self.remember(&mut state, entry.client_id, &offers, now);
                out.push((entry.client_id, CheckInResponse { offers }));
            }
            self.cache.restore(leftovers);
        }
        out
    }

    pub fn bindings(&self) -> Vec<Binding> {
        self.state.lock().ledger.clone()
    }
}

/// Routes clients to shards by a stable hash of the client id.
pub struct ShardRouter<T> {
    shards: Vec<T>,
}

/// SplitMix64 finalizer; stable across platforms and releases.
pub fn stable_hash(id: ClientId) -> u64 {
    let mut z = id.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn route(client: ClientId, shard_count: usize) -> usize {
    if shard_count <= 1 {
        return 0;
    }
    (stable_hash(client) % shard_count as u64) as usize
}

impl<T> ShardRouter<T> {
    /// Panics if `shards` is empty.
    pub fn new(shards: Vec<T>) -> Self {
        assert!(!shards.is_empty(), "at least one shard is required");
        Self { shards }
    }

    pub fn route(&self, client: ClientId) -> usize {
        route(client, self.shards.len())
    }

    pub fn shard_for(&self, client: ClientId) -> &T {
        &self.shards[self.route(client)]
    }

    pub fn shards(&self) -> &[T] {
        &self.shards
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }
}

/// Requesting jobs are ordered by rank; used by tests and audits.
pub fn is_rank_sorted(offers: &[TaskOffer], jobs: &JobStore) -> bool {
    let recs: Vec<_> = offers.iter().filter_map(|o| jobs.get(o.job_id)).collect();
    recs.windows(2)
        .all(|w| crate::store::rank_order(&w[0], &w[1]) != std::cmp::Ordering::Greater)
        && recs.iter().all(|r| r.state == JobState::Requesting)
}
