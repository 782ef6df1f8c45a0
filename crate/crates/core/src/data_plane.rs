//! Hierarchical plan distribution and result aggregation.
//!
//! Servers form a tree given as a parent-pointer list. Clients fetch a
//! round's execution plan from their home leaf, which pulls it from its
//! ancestors on a miss and caches it under a TTL. Results uploaded to a
//! leaf are folded into the leaf's buffer with a [`Reducer`]; buffers are
//! periodically flushed into the parent, and at the root into the round's
//! master state. Because reducers are associative and commutative, the
//! root's result does not depend on tree shape or flush timing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Debug;
use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::domain::{JobId, Seconds};
use crate::error::DataPlaneError;
use crate::messages::{DataMessage, DataReply, DataStatus, FlushEntry};

/// An associative, commutative aggregation.
///
/// Laws (up to floating-point tolerance):
/// `merge(a, merge(b, c)) == merge(merge(a, b), c)`, `merge(a, b) == merge(b, a)`,
/// `absorb(s, c) == merge(s, absorb(init(), c))`, and `count` is additive
/// under `merge`.
pub trait Reducer {
    type State: Clone + Debug;
    type Contribution: Clone + Debug;
    type Output;

    fn init(&self) -> Self::State;
    fn absorb(&self, state: Self::State, contribution: &Self::Contribution) -> Self::State;
    fn merge(&self, a: Self::State, b: Self::State) -> Self::State;
    fn count(&self, state: &Self::State) -> u64;
    fn finalize(&self, state: &Self::State) -> Option<Self::Output>;
    /// Length of the contribution vector, for shape checks.
    fn shape(&self, contribution: &Self::Contribution) -> usize;
}

/// A client update weighted by its local sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub vector: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FedAvgState {
    pub weighted_sum: Vec<f64>,
    pub total_weight: f64,
    pub n: u64,
}

impl FedAvgState {
    /// `weighted_sum / total_weight`, defined when the total weight is positive.
    pub fn finalize(&self) -> Option<Vec<f64>> {
        if self.total_weight > 0.0 {
            Some(self.weighted_sum.iter().map(|x| x / self.total_weight).collect())
        } else {
            None
        }
    }
}

/// Weighted federated averaging.
#[derive(Clone, Copy, Debug, Default)]
pub struct FedAvg;

impl Reducer for FedAvg {
    type State = FedAvgState;
    type Contribution = Contribution;
    type Output = Vec<f64>;

    fn init(&self) -> FedAvgState {
        FedAvgState::default()
    }

    fn absorb(&self, mut state: FedAvgState, c: &Contribution) -> FedAvgState {
        if state.weighted_sum.len() < c.vector.len() {
            state.weighted_sum.resize(c.vector.len(), 0.0);
        }
        for (acc, x) in state.weighted_sum.iter_mut().zip(&c.vector) {
            *acc += c.weight * x;
        }
        state.total_weight += c.weight;
        state.n += 1;
        state
    }

    fn merge(&self, mut a: FedAvgState, mut b: FedAvgState) -> FedAvgState {
        if a.weighted_sum.len() < b.weighted_sum.len() {
            std::mem::swap(&mut a, &mut b);
        }
        for (acc, x) in a.weighted_sum.iter_mut().zip(&b.weighted_sum) {
            *acc += x;
        }
        a.total_weight += b.total_weight;
        a.n += b.n;
        a
    }

    fn count(&self, state: &FedAvgState) -> u64 {
        state.n
    }

    fn finalize(&self, state: &FedAvgState) -> Option<Vec<f64>> {
        state.finalize()
    }

    fn shape(&self, c: &Contribution) -> usize {
        c.vector.len()
    }
}

/// A round's execution plan; the payload stands in for model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecPlan {
    pub job_id: JobId,
    pub round: u32,
    pub payload: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Results are reduced inside the tree; frameworks see only aggregates.
    Offload,
    /// Raw contributions pass through to the framework unaggregated.
    Bypass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPlaneConfig {
    pub ttl: Seconds,
    pub flush_period: Seconds,
    /// Plan-cache entries per node; least recently used go first.
    pub cache_capacity: usize,
    pub mode: AggregationMode,
}

impl Default for DataPlaneConfig {
    fn default() -> Self {
        Self {
            ttl: 60.0,
            flush_period: 5.0,
            cache_capacity: 64,
            mode: AggregationMode::Offload,
        }
    }
}

type RoundKey = (JobId, u32);

struct ServerNode<S> {
    parent: Option<usize>,
    depth: usize,
    plan_cache: LruCache<RoundKey, (Arc<ExecPlan>, Seconds)>,
    agg_buffer: BTreeMap<RoundKey, S>,
    last_flush: Seconds,
    upstream_pulls: u64,
}

/// Result of a plan fetch.
#[derive(Clone, Debug)]
pub struct Fetched {
    pub plan: Arc<ExecPlan>,
    /// Requests sent to parents while serving this fetch.
    pub upstream_pulls: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult<O> {
    pub result: O,
    pub count: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub fetches: u64,
    pub upstream_pulls: u64,
    pub uploads: u64,
    pub flush_messages: u64,
    pub late_drops: u64,
}

pub struct DataPlane<R: Reducer = FedAvg> {
    reducer: R,
    config: DataPlaneConfig,
    nodes: Vec<ServerNode<R::State>>,
    root: usize,
    leaves: Vec<usize>,
    // nodes ordered deepest first, so a single sweep carries data to the root
    flush_order: Vec<usize>,
    plans: HashMap<JobId, Arc<ExecPlan>>,
    master: BTreeMap<RoundKey, R::State>,
    closed: HashSet<RoundKey>,
    raw: BTreeMap<RoundKey, Vec<R::Contribution>>,
    counters: TrafficCounters,
}

/// Validates a parent-pointer list: exactly one root and no cycles.
/// Returns the root index and node depths.
pub fn validate_tree(parents: &[Option<usize>]) -> Result<(usize, Vec<usize>), DataPlaneError> {
    let roots: Vec<usize> = (0..parents.len()).filter(|&i| parents[i].is_none()).collect();
    if roots.len() != 1 {
        return Err(DataPlaneError::InvalidTree(format!("expected one root, found {}", roots.len())));
    }
    let mut depths = vec![0usize; parents.len()];
    for (i, depth) in depths.iter_mut().enumerate() {
        let mut node = i;
        let mut d = 0;
        while let Some(p) = parents[node] {
            if p >= parents.len() {
                return Err(DataPlaneError::InvalidTree(format!("node {node} has unknown parent {p}")));
            }
            d += 1;
            if d > parents.len() {
                return Err(DataPlaneError::InvalidTree("cycle in parent list".into()));
            }
            node = p;
        }
        *depth = d;
    }
    Ok((roots[0], depths))
}

impl<R: Reducer> DataPlane<R> {
    pub fn new(reducer: R, parents: &[Option<usize>], config: DataPlaneConfig) -> Result<Self, DataPlaneError> {
        let (root, depths) = validate_tree(parents)?;
        let cap = NonZeroUsize::new(config.cache_capacity.max(1)).expect("nonzero");
        let nodes: Vec<ServerNode<R::State>> = parents
            .iter()
            .zip(&depths)
            .map(|(p, d)| ServerNode {
                parent: *p,
                depth: *d,
                plan_cache: LruCache::new(cap),
                agg_buffer: BTreeMap::new(),
                last_flush: 0.0,
                upstream_pulls: 0,
            })
            .collect();
        let mut has_child = vec![false; parents.len()];
        for p in parents.iter().flatten() {
            has_child[*p] = true;
        }
        let leaves = (0..parents.len()).filter(|&i| !has_child[i]).collect();
        let mut flush_order: Vec<usize> = (0..parents.len()).collect();
        flush_order.sort_by(|a, b| nodes[*b].depth.cmp(&nodes[*a].depth).then(a.cmp(b)));
        Ok(Self {
            reducer,
            config,
            nodes,
            root,
            leaves,
            flush_order,
            plans: HashMap::new(),
            master: BTreeMap::new(),
            closed: HashSet::new(),
            raw: BTreeMap::new(),
            counters: TrafficCounters::default(),
        })
    }

    pub fn config(&self) -> &DataPlaneConfig {
        &self.config
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self, node: usize) -> Option<usize> {
        self.nodes.get(node).map(|n| n.depth)
    }

    pub fn counters(&self) -> TrafficCounters {
        self.counters
    }

    pub fn upstream_pulls_from(&self, node: usize) -> u64 {
        self.nodes.get(node).map_or(0, |n| n.upstream_pulls)
    }

    /// Publishes the plan for a new round at the root. Earlier rounds of the
    /// job become stale.
    pub fn publish_plan(&mut self, plan: ExecPlan) {
        self.plans.insert(plan.job_id, Arc::new(plan));
    }

    fn origin(&self, job: JobId, round: u32) -> Result<Arc<ExecPlan>, DataPlaneError> {
        match self.plans.get(&job) {
            None => Err(DataPlaneError::NotReady { job, round }),
            Some(p) if p.round == round => Ok(p.clone()),
            Some(p) if p.round > round => Err(DataPlaneError::StaleRound {
                job,
                round,
                current: p.round,
            }),
            Some(_) => Err(DataPlaneError::NotReady { job, round }),
        }
    }

    /// Serves a plan from `leaf`, pulling through the parent chain on a miss.
    pub fn fetch_plan(&mut self, leaf: usize, job: JobId, round: u32, now: Seconds) -> Result<Fetched, DataPlaneError> {
        if leaf >= self.nodes.len() {
            return Err(DataPlaneError::UnknownNode(leaf));
        }
        let origin = self.origin(job, round)?;
        self.counters.fetches += 1;
        let key = (job, round);
        let mut missed = Vec::new();
        let mut node = leaf;
        let plan = loop {
            if node == self.root {
                break origin;
            }
            let n = &mut self.nodes[node];
            match n.plan_cache.get(&key) {
                Some((plan, expiry)) if *expiry >= now => break plan.clone(),
                Some(_) => {
                    n.plan_cache.pop(&key);
                }
                None => {}
            }
            n.upstream_pulls += 1;
            missed.push(node);
            node = n.parent.expect("non-root node has a parent");
        };
        let expiry = now + self.config.ttl;
        for &m in &missed {
            self.nodes[m].plan_cache.put(key, (plan.clone(), expiry));
        }
        let pulls = missed.len() as u32;
        self.counters.upstream_pulls += u64::from(pulls);
        Ok(Fetched {
            plan,
            upstream_pulls: pulls,
        })
    }

    /// Drops expired plan-cache entries everywhere.
    pub fn sweep(&mut self, now: Seconds) -> usize {
        let mut dropped = 0;
        for n in &mut self.nodes {
            let expired: Vec<RoundKey> = n
                .plan_cache
                .iter()
                .filter(|(_, (_, expiry))| *expiry < now)
                .map(|(k, _)| *k)
                .collect();
            for k in expired {
                n.plan_cache.pop(&k);
                dropped += 1;
            }
        }
        dropped
    }

    /// Folds a client's result into the leaf's buffer.
    pub fn upload_result(
        &mut self,
        leaf: usize,
        job: JobId,
        round: u32,
        contribution: R::Contribution,
    ) -> Result<(), DataPlaneError> {
        if leaf >= self.nodes.len() {
            return Err(DataPlaneError::UnknownNode(leaf));
        }
        if !self.leaves.contains(&leaf) {
            return Err(DataPlaneError::NotALeaf(leaf));
        }
        let key = (job, round);
        if self.closed.contains(&key) {
            self.counters.late_drops += 1;
            return Err(DataPlaneError::Late { job, round });
        }
        let plan = match self.origin(job, round) {
            Ok(p) => p,
            Err(DataPlaneError::StaleRound { .. }) => {
                self.counters.late_drops += 1;
                return Err(DataPlaneError::Late { job, round });
            }
            Err(e) => return Err(e),
        };
        let got = self.reducer.shape(&contribution);
        if got != plan.payload.len() {
            return Err(DataPlaneError::ShapeMismatch {
                expected: plan.payload.len(),
                got,
            });
        }
        self.counters.uploads += 1;
        if self.config.mode == AggregationMode::Bypass {
            self.raw.entry(key).or_default().push(contribution);
            return Ok(());
        }
        let reducer = &self.reducer;
        let buf = &mut self.nodes[leaf].agg_buffer;
        let state = buf.remove(&key).unwrap_or_else(|| reducer.init());
        buf.insert(key, reducer.absorb(state, &contribution));
        Ok(())
    }

    fn deliver(&mut self, from: usize, key: RoundKey, state: R::State) {
        if self.closed.contains(&key) {
            self.counters.late_drops += self.reducer.count(&state);
            return;
        }
        let reducer = &self.reducer;
        let target = match self.nodes[from].parent {
            Some(p) => &mut self.nodes[p].agg_buffer,
            None => &mut self.master,
        };
        let merged = match target.remove(&key) {
            Some(prev) => reducer.merge(prev, state),
            None => state,
        };
        target.insert(key, merged);
    }

    /// Sends every non-empty buffer entry of `node` one level up. Returns the
    /// number of entries sent; an empty buffer sends nothing.
    pub fn flush(&mut self, node: usize, now: Seconds) -> usize {
        let Some(n) = self.nodes.get_mut(node) else { return 0 };
        n.last_flush = now;
        let entries = std::mem::take(&mut n.agg_buffer);
        if entries.is_empty() {
            return 0;
        }
        self.counters.flush_messages += 1;
        let sent = entries.len();
        for (key, state) in entries {
            self.deliver(node, key, state);
        }
        sent
    }

    /// Flushes every node whose period has elapsed, deepest first.
    pub fn flush_due(&mut self, now: Seconds) -> usize {
        let period = self.config.flush_period;
        let order = self.flush_order.clone();
        let mut sent = 0;
        for i in order {
            if now >= self.nodes[i].last_flush + period {
                sent += self.flush(i, now);
            }
        }
        sent
    }

    /// Forces the round's partial aggregates up to the root and closes it.
    /// Contributions for the round arriving later are dropped as late.
    pub fn close_round(&mut self, job: JobId, round: u32) {
        let key = (job, round);
        let order = self.flush_order.clone();
        for i in order {
            if let Some(state) = self.nodes[i].agg_buffer.remove(&key) {
                self.counters.flush_messages += 1;
                self.deliver(i, key, state);
            }
        }
        self.closed.insert(key);
    }

    pub fn is_closed(&self, job: JobId, round: u32) -> bool {
        self.closed.contains(&(job, round))
    }

    /// Contributions merged at the root so far.
    pub fn root_count(&self, job: JobId, round: u32) -> u64 {
        self.master.get(&(job, round)).map_or(0, |s| self.reducer.count(s))
    }

    /// Finalized aggregate and contribution count for a round. Individual
    /// contributions are never exposed here.
    pub fn get_round_result(&self, job: JobId, round: u32) -> Result<RoundResult<R::Output>, DataPlaneError> {
        let state = self
            .master
            .get(&(job, round))
            .filter(|s| self.reducer.count(s) > 0)
            .ok_or(DataPlaneError::NotReady { job, round })?;
        let result = self
            .reducer
            .finalize(state)
            .ok_or(DataPlaneError::ZeroWeight { job, round })?;
        Ok(RoundResult {
            result,
            count: self.reducer.count(state),
        })
    }

    /// Raw contributions, available only in bypass mode.
    pub fn take_raw(&mut self, job: JobId, round: u32) -> Result<Vec<R::Contribution>, DataPlaneError> {
        if self.config.mode != AggregationMode::Bypass {
            return Err(DataPlaneError::Offloaded);
        }
        Ok(self.raw.remove(&(job, round)).unwrap_or_default())
    }

    /// Drops root state for a round the framework has consumed.
    pub fn forget_round(&mut self, job: JobId, round: u32) {
        self.master.remove(&(job, round));
    }
}

impl DataPlane<FedAvg> {
    /// Message entry point. `node` is the server the message is addressed to.
    pub fn handle(&mut self, node: usize, msg: DataMessage, now: Seconds) -> DataReply {
        fn status_of(e: &DataPlaneError) -> DataStatus {
            match e {
                DataPlaneError::NotReady { .. } | DataPlaneError::ZeroWeight { .. } => DataStatus::NotReady,
                DataPlaneError::StaleRound { .. } => DataStatus::StaleRound,
                DataPlaneError::Late { .. } => DataStatus::Late,
                _ => DataStatus::Rejected,
            }
        }
        match msg {
            DataMessage::FetchPlan { job_id, round } => match self.fetch_plan(node, job_id, round, now) {
                Ok(f) => DataReply::Plan {
                    status: DataStatus::Ok,
                    payload: Some(f.plan.payload.clone()),
                },
                Err(e) => DataReply::Plan {
                    status: status_of(&e),
                    payload: None,
                },
            },
            DataMessage::Upload {
                job_id,
                round,
                vector,
                weight,
            } => {
                let status = match self.upload_result(node, job_id, round, Contribution { vector, weight }) {
                    Ok(()) => DataStatus::Ok,
                    Err(e) => status_of(&e),
                };
                DataReply::Status { status }
            }
            DataMessage::Flush { entries } => {
                if node >= self.nodes.len() {
                    return DataReply::Status {
                        status: DataStatus::Rejected,
                    };
                }
                // entries arrive from a child of `node`; merge into its buffer
                for FlushEntry { job_id, round, state } in entries {
                    let key = (job_id, round);
                    if self.closed.contains(&key) {
                        self.counters.late_drops += state.n;
                        continue;
                    }
                    let target = if node == self.root {
                        &mut self.master
                    } else {
                        &mut self.nodes[node].agg_buffer
                    };
                    let merged = match target.remove(&key) {
                        Some(prev) => FedAvg.merge(prev, state),
                        None => state,
                    };
                    target.insert(key, merged);
                }
                DataReply::Status { status: DataStatus::Ok }
            }
            DataMessage::PublishPlan { job_id, round, payload } => {
                self.publish_plan(ExecPlan { job_id, round, payload });
                DataReply::Status { status: DataStatus::Ok }
            }
            DataMessage::GetResult { job_id, round } => match self.get_round_result(job_id, round) {
                Ok(r) => DataReply::Result {
                    status: DataStatus::Ok,
                    vector: Some(r.result),
                    count: r.count,
                },
                Err(e) => DataReply::Result {
                    status: status_of(&e),
                    vector: None,
                    count: 0,
                },
            },
        }
    }
}
