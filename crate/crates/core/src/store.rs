//! Soft-state storage shared by the control-plane layers.
//!
//! * [`JobStore`]: the job database, indexed by job id.
//! * [`ClientWindowStore`]: recent client metadata under a sliding window.
//! * [`ClientCache`]: short-lived queue of available clients used by
//!   small-batch scheduling.
//!
//! All stores take `&self` and are safe to share between threads. Single-key
//! read-modify-write operations hold the store lock for their whole duration.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::{self, Write};

use parking_lot::{Mutex, RwLock};

use crate::domain::{AttributeMap, ClientId, ClientInfo, Constraint, JobId, JobRecord, JobState, Query, Seconds};
use crate::error::IncrementRejected;

/// Default sliding-window duration.
pub const DEFAULT_WINDOW_SECS: Seconds = 300.0;
/// Default sliding-window capacity.
pub const DEFAULT_WINDOW_CAPACITY: usize = 10_000;
/// Default lifetime of a small-batch cache entry.
pub const DEFAULT_CACHE_TTL_SECS: Seconds = 30.0;

/// Priority order over job records: score descending, then registration
/// time ascending, then job id ascending.
pub fn rank_order(a: &JobRecord, b: &JobRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.time_stamp.total_cmp(&b.time_stamp))
        .then(a.job_id.cmp(&b.job_id))
}

#[derive(Debug, Default)]
pub struct JobStore {
    records: RwLock<BTreeMap<JobId, JobRecord>>,
}

impl JobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the record under its id.
    pub fn put(&self, record: JobRecord) {
        self.records.write().insert(record.job_id, record);
    }

    pub fn get(&self, id: JobId) -> Option<JobRecord> {
        self.records.read().get(&id).cloned()
    }

    pub fn exists(&self, id: JobId) -> bool {
        self.records.read().contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn field(&self, id: JobId, name: &str) -> Option<f64> {
        self.records.read().get(&id).and_then(|r| r.field(name))
    }

    /// Ids of records matching `q`, in rank order. Clauses over unknown
    /// fields never match.
    pub fn query(&self, q: &Query) -> Vec<JobId> {
        self.ranked(|r| q.eval_with(|name| r.field(name)))
            .into_iter()
            .map(|r| r.job_id)
            .collect()
    }

    /// Clones of the records accepted by `filter`, in rank order.
    pub fn ranked<F>(&self, filter: F) -> Vec<JobRecord>
    where
        F: Fn(&JobRecord) -> bool,
    {
        let mut out: Vec<JobRecord> = self.records.read().values().filter(|r| filter(r)).cloned().collect();
        out.sort_by(rank_order);
        out
    }

    /// Returns `None` when the job is absent.
    pub fn set_score(&self, id: JobId, score: f64) -> Option<()> {
        self.records.write().get_mut(&id).map(|r| r.score = score)
    }

    /// Atomically claims one allocation slot for the job's current round.
    pub fn increment_amount(&self, id: JobId) -> Result<u32, IncrementRejected> {
        let mut records = self.records.write();
        let rec = records.get_mut(&id).ok_or(IncrementRejected::UnknownJob(id))?;
        if rec.state != JobState::Requesting {
            return Err(IncrementRejected::NotRequesting(id));
        }
        if rec.amount >= rec.demand {
            return Err(IncrementRejected::Saturated(id));
        }
        rec.amount += 1;
        Ok(rec.amount)
    }

    /// Applies `f` to the record under the write lock.
    pub fn update<R, F>(&self, id: JobId, f: F) -> Option<R>
    where
        F: FnOnce(&mut JobRecord) -> R,
    {
        self.records.write().get_mut(&id).map(f)
    }

    /// All records ordered by job id.
    pub fn snapshot(&self) -> Vec<JobRecord> {
        self.records.read().values().cloned().collect()
    }

    /// Writes one JSON record per line, ordered by job id.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for rec in self.snapshot() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub duration: Seconds,
    pub capacity: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            duration: DEFAULT_WINDOW_SECS,
            capacity: DEFAULT_WINDOW_CAPACITY,
        }
    }
}

#[derive(Debug, Default)]
struct WindowInner {
    // (arrival, seq, client); entries whose seq no longer matches `latest`
    // were superseded by a newer check-in of the same client
    order: VecDeque<(Seconds, u64, ClientId)>,
    latest: HashMap<ClientId, (u64, Seconds, ClientInfo)>,
    next_seq: u64,
}

impl WindowInner {
    fn pop_front_live(&mut self) -> bool {
        while let Some((_, seq, id)) = self.order.pop_front() {
            if self.latest.get(&id).is_some_and(|(s, _, _)| *s == seq) {
                self.latest.remove(&id);
                return true;
            }
        }
        false
    }

    fn front_live_time(&mut self) -> Option<Seconds> {
        while let Some(&(t, seq, id)) = self.order.front() {
            if self.latest.get(&id).is_some_and(|(s, _, _)| *s == seq) {
                return Some(t);
            }
            self.order.pop_front();
        }
        None
    }
}

/// Client metadata kept under a sliding window that is bounded both by age
/// and by entry count. A client checking in again replaces its older entry.
#[derive(Debug)]
pub struct ClientWindowStore {
    config: WindowConfig,
    inner: Mutex<WindowInner>,
}

impl Default for ClientWindowStore {
    fn default() -> Self {
        Self::new(WindowConfig::default())
    }
}

impl ClientWindowStore {
    pub fn new(config: WindowConfig) -> Self {
        Self {
            config,
            inner: Mutex::new(WindowInner::default()),
        }
    }

    pub fn config(&self) -> WindowConfig {
        self.config
    }

    /// Records `info` as arriving at `t`. Times must be non-decreasing.
    pub fn insert(&self, t: Seconds, info: ClientInfo) {
        let mut inner = self.inner.lock();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.order.push_back((t, seq, info.client_id));
        inner.latest.insert(info.client_id, (seq, t, info));
        while inner.latest.len() > self.config.capacity {
            inner.pop_front_live();
        }
    }

    /// Drops entries older than `t - duration`; returns how many were dropped.
    pub fn evict(&self, t: Seconds) -> usize {
        let horizon = t - self.config.duration;
        let mut inner = self.inner.lock();
        let mut evicted = 0;
        while let Some(front) = inner.front_live_time() {
            if front >= horizon {
                break;
            }
            inner.pop_front_live();
            evicted += 1;
        }
        evicted
    }

    /// Number of clients in the window.
    pub fn size(&self) -> usize {
        self.inner.lock().latest.len()
    }

    pub fn count_satisfying(&self, c: &Constraint) -> usize {
        self.inner
            .lock()
            .latest
            .values()
            .filter(|(_, _, info)| c.is_satisfied_by(&info.public_attrs))
            .count()
    }

    /// Fraction of windowed clients whose public attributes satisfy `c`;
    /// zero for an empty window.
    pub fn proportion(&self, c: &Constraint) -> f64 {
        let inner = self.inner.lock();
        let total = inner.latest.len();
        if total == 0 {
            return 0.0;
        }
        let hits = inner
            .latest
            .values()
            .filter(|(_, _, info)| c.is_satisfied_by(&info.public_attrs))
            .count();
        hits as f64 / total as f64
    }

    pub fn subset_size(&self, q: &Query) -> usize {
        self.inner
            .lock()
            .latest
            .values()
            .filter(|(_, _, info)| q.matches(&info.public_attrs))
            .count()
    }

    /// Current contents as `(arrival, client)` in arrival order.
    pub fn snapshot(&self) -> Vec<(Seconds, ClientInfo)> {
        let inner = self.inner.lock();
        let mut out: Vec<(u64, Seconds, ClientInfo)> =
            inner.latest.values().map(|(s, t, info)| (*s, *t, info.clone())).collect();
        out.sort_by_key(|(s, _, _)| *s);
        out.into_iter().map(|(_, t, info)| (t, info)).collect()
    }
}

/// One available client in the small-batch cache.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub client_id: ClientId,
    pub public_attrs: AttributeMap,
    pub expiry: Seconds,
}

#[derive(Debug, Default)]
struct CacheInner {
    queue: VecDeque<CacheEntry>,
    present: HashSet<ClientId>,
}

/// Queue of recently available clients. A client appears at most once, and
/// a taken client is gone from the cache before the caller sees it.
#[derive(Debug)]
pub struct ClientCache {
    ttl: Seconds,
    inner: Mutex<CacheInner>,
}

impl Default for ClientCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_TTL_SECS)
    }
}

impl ClientCache {
    pub fn new(ttl: Seconds) -> Self {
        Self {
            ttl,
            inner: Mutex::new(CacheInner::default()),
        }
    }

    pub fn ttl(&self) -> Seconds {
        self.ttl
    }

    /// Caches the client until `now + ttl`, replacing any previous entry.
    pub fn push_client(&self, client_id: ClientId, public_attrs: AttributeMap, now: Seconds) {
        self.push(CacheEntry {
            client_id,
            public_attrs,
            expiry: now + self.ttl,
        });
    }

    pub fn push(&self, entry: CacheEntry) {
        let mut inner = self.inner.lock();
        if !inner.present.insert(entry.client_id) {
            inner.queue.retain(|e| e.client_id != entry.client_id);
        }
        inner.queue.push_back(entry);
    }

    /// Removes and returns up to `k` of the oldest unexpired entries matching
    /// `q`. Expired entries met along the way are discarded.
    pub fn take_matching(&self, q: &Query, k: usize, now: Seconds) -> Vec<CacheEntry> {
        self.take_matching_by(|e| q.matches(&e.public_attrs), k, now)
    }

    pub fn take_matching_by<F>(&self, pred: F, k: usize, now: Seconds) -> Vec<CacheEntry>
    where
        F: Fn(&CacheEntry) -> bool,
    {
        let mut inner = self.inner.lock();
        let mut taken = Vec::new();
        let mut kept = VecDeque::with_capacity(inner.queue.len());
        while let Some(entry) = inner.queue.pop_front() {
            if entry.expiry < now {
                inner.present.remove(&entry.client_id);
            } else if taken.len() < k && pred(&entry) {
                inner.present.remove(&entry.client_id);
                taken.push(entry);
            } else {
                kept.push_back(entry);
            }
        }
        inner.queue = kept;
        taken
    }

    /// Puts previously taken entries back at the head, preserving their order.
    pub fn restore(&self, entries: Vec<CacheEntry>) {
        let mut inner = self.inner.lock();
        for entry in entries.into_iter().rev() {
            if inner.present.insert(entry.client_id) {
                inner.queue.push_front(entry);
            }
        }
    }

    pub fn remove(&self, client_id: ClientId) -> bool {
        let mut inner = self.inner.lock();
        if inner.present.remove(&client_id) {
            inner.queue.retain(|e| e.client_id != client_id);
            true
        } else {
            false
        }
    }

    /// Discards expired entries and returns their ids.
    pub fn purge_expired(&self, now: Seconds) -> Vec<ClientId> {
        let mut inner = self.inner.lock();
        let mut gone = Vec::new();
        let CacheInner { queue, present } = &mut *inner;
        queue.retain(|e| {
            if e.expiry < now {
                present.remove(&e.client_id);
                gone.push(e.client_id);
                false
            } else {
                true
            }
        });
        gone
    }

    pub fn len(&self) -> usize {
        self.inner.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, client_id: ClientId) -> bool {
        self.inner.lock().present.contains(&client_id)
    }
}
