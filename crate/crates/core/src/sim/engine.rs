//! The discrete-event simulation loop.
//!
//! Every message leg costs `leg_ms`. A client runs one activity chain at a
//! time; chain events carry the client's epoch and are dropped once the
//! epoch moves on (departure, new session). Task time is the bind reply,
//! the plan fetch through the data-plane tree, download, compute, upload.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client_manager::{AcceptOutcome, CheckInOutcome, ClientManagerConfig, TaskOffer};
use crate::control_plane::{ControlPlane, ControlPlaneConfig};
use crate::data_plane::{Contribution, DataPlane, ExecPlan, FedAvg, TrafficCounters};
use crate::domain::{ClientId, ClientInfo, JobId};
use crate::error::SimError;
use crate::job_manager::AdmissionConfig;
use crate::sim::baselines::{pick_uniform, static_partition, JobView};
use crate::sim::config::{ExperimentConfig, PlannedJob};
use crate::sim::events::{from_secs, to_secs, EventQueue, LogRecord, Millis, Mode, RunStatus};
use crate::sim::metrics::{compute_metrics, MetricsReport};
use crate::sim::trace::TraceRecord;
use crate::store::WindowConfig;

/// Counters that are not part of the event log.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunStats {
    pub events: u64,
    pub checkins: u64,
    pub handshakes: u64,
    pub rejected_accepts: u64,
    pub data_plane: TrafficCounters,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: Vec<LogRecord>,
    pub report: MetricsReport,
    pub stats: RunStats,
}

#[derive(Debug)]
enum Ev {
    Arrive { c: usize, session: usize },
    Depart { c: usize, session: usize },
    Act { c: usize, epoch: u32 },
    Checkin { c: usize, epoch: u32 },
    CacheTimeout { c: usize, epoch: u32, token: u32 },
    Handshake { c: usize, epoch: u32, job: JobId },
    Accept { c: usize, epoch: u32, job: JobId, rest: Vec<JobId> },
    TaskDone { c: usize, epoch: u32, job: JobId, round: u32, start: Millis },
    Submit { j: usize },
    RequestTimeout { j: usize, round: u32 },
    FlushTick,
    SchedTick,
}

struct SimClient {
    id: ClientId,
    info: Option<ClientInfo>,
    session: usize,
    leaf: usize,
    epoch: u32,
    wait_token: u32,
    task: Option<(JobId, u32, Millis)>,
    static_job: Option<JobId>,
}

struct SimJob {
    planned: PlannedJob,
    id: Option<JobId>,
    submitted: Option<Millis>,
    round: u32,
    outstanding: u32,
    request_closed: bool,
    finished: bool,
    last_progress: Millis,
    payload: Vec<f64>,
    served: BTreeSet<usize>,
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    trace: Vec<&'a TraceRecord>,
    leg: Millis,
    backoff: Millis,
    horizon: Millis,
    q: EventQueue<Ev>,
    log: Vec<LogRecord>,
    cp: ControlPlane,
    dp: DataPlane<FedAvg>,
    clients: Vec<SimClient>,
    by_id: BTreeMap<ClientId, usize>,
    jobs: Vec<SimJob>,
    job_index: BTreeMap<JobId, usize>,
    directory: Vec<JobId>,
    rng: ChaCha8Rng,
    stats: RunStats,
    ended: bool,
}

/// Runs one experiment. Identical inputs give an identical log.
pub fn run(cfg: &ExperimentConfig, trace: &[TraceRecord]) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, trace)?;
    sim.run();
    let report = compute_metrics(&sim.log);
    sim.stats.data_plane = sim.dp.counters();
    Ok(RunOutput {
        log: sim.log,
        report,
        stats: sim.stats,
    })
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ExperimentConfig, trace: &'a [TraceRecord]) -> Result<Self, SimError> {
        let n = cfg.num_clients as u64;
        let mut records: Vec<&TraceRecord> = trace.iter().filter(|r| r.client_id.0 < n).collect();
        records.sort_by(|a, b| a.client_id.cmp(&b.client_id).then(a.avail_start.total_cmp(&b.avail_start)));
        for w in records.windows(2) {
            if w[0].client_id == w[1].client_id && w[1].avail_start <= w[0].avail_end {
                return Err(SimError::Config(format!("overlapping sessions for {}", w[0].client_id)));
            }
        }
        let distinct = records.iter().map(|r| r.client_id).collect::<BTreeSet<_>>().len();
        if distinct < cfg.num_clients {
            return Err(SimError::Config(format!(
                "trace has {distinct} clients below id {n}, config needs {}",
                cfg.num_clients
            )));
        }

        let c = &cfg.control;
        let cp = ControlPlane::new(
            ControlPlaneConfig {
                shards: c.shards,
                window: WindowConfig {
                    duration: c.window,
                    capacity: c.window_capacity,
                },
                cache_ttl: c.cache_ttl,
                admission: AdmissionConfig {
                    cap_fraction: c.admission_cap_fraction,
                    grace_secs: c.admission_grace,
                },
                client_manager: ClientManagerConfig {
                    offers_per_checkin: c.offers_per_checkin,
                    offer_validity: c.offer_validity,
                },
            },
            cfg.policy.build(cfg.seed),
            0.0,
        );
        let dp = DataPlane::new(
            FedAvg,
            &cfg.data_plane.parent_list()?,
            cfg.data_plane.config(cfg.timing.flush_period),
        )?;
        let leaves = dp.leaves().to_vec();

        let mut clients = Vec::new();
        let mut by_id = BTreeMap::new();
        for r in &records {
            if let Entry::Vacant(slot) = by_id.entry(r.client_id) {
                slot.insert(clients.len());
                clients.push(SimClient {
                    id: r.client_id,
                    info: None,
                    session: usize::MAX,
                    leaf: leaves[r.region as usize % leaves.len()],
                    epoch: 0,
                    wait_token: 0,
                    task: None,
                    static_job: None,
                });
            }
        }
        let trace_end = records.iter().map(|r| r.avail_end).fold(0.0, f64::max);
        let horizon = from_secs(cfg.timing.horizon.unwrap_or(trace_end));
        let jobs = cfg
            .planned_jobs()
            .into_iter()
            .map(|planned| SimJob {
                planned,
                id: None,
                submitted: None,
                round: 0,
                outstanding: 0,
                request_closed: false,
                finished: false,
                last_progress: 0,
                payload: vec![0.0; cfg.data_plane.model_dim],
                served: BTreeSet::new(),
            })
            .collect();
        Ok(Self {
            cfg,
            trace: records,
            leg: cfg.timing.leg_ms,
            backoff: from_secs(cfg.timing.backoff),
            horizon,
            q: EventQueue::default(),
            log: Vec::new(),
            cp,
            dp,
            clients,
            by_id,
            jobs,
            job_index: BTreeMap::new(),
            directory: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stats: RunStats::default(),
            ended: false,
        })
    }

    fn run(&mut self) {
        self.log.push(LogRecord::RunStart {
            t: 0,
            mode: self.cfg.mode,
            num_clients: self.cfg.num_clients,
            seed: self.cfg.seed,
        });
        for j in 0..self.jobs.len() {
            let at = from_secs(self.jobs[j].planned.arrival);
            self.q.push(at, Ev::Submit { j });
        }
        for (i, r) in self.trace.iter().enumerate() {
            let at = from_secs(r.avail_start);
            if at <= self.horizon {
                let c = self.by_id[&r.client_id];
                self.q.push(at, Ev::Arrive { c, session: i });
            }
        }
        self.q.push(0, Ev::SchedTick);
        self.q.push(0, Ev::FlushTick);
        while let Some((t, ev)) = self.q.pop() {
            if t > self.horizon {
                self.end_run(self.horizon, RunStatus::Failed, "horizon reached".into());
                break;
            }
            self.stats.events += 1;
            self.handle(t, ev);
            if self.ended {
                break;
            }
        }
        if !self.ended {
            let t = self.q.now();
            self.end_run(t, RunStatus::Failed, "no events left".into());
        }
    }

    fn handle(&mut self, t: Millis, ev: Ev) {
        match ev {
            Ev::Arrive { c, session } => self.on_arrive(c, session, t),
            Ev::Depart { c, session } => self.on_depart(c, session, t),
            Ev::Act { c, epoch } => {
                if self.live(c, epoch) {
                    self.client_act(c, t);
                }
            }
            Ev::Checkin { c, epoch } => {
                if self.live(c, epoch) {
                    self.on_checkin(c, t);
                }
            }
            Ev::CacheTimeout { c, epoch, token } => {
                if self.live(c, epoch) && self.clients[c].wait_token == token {
                    self.client_act(c, t);
                }
            }
            Ev::Handshake { c, epoch, job } => {
                if self.live(c, epoch) {
                    self.on_handshake(c, job, t);
                }
            }
            Ev::Accept { c, epoch, job, rest } => {
                if self.live(c, epoch) {
                    self.on_accept(c, job, rest, t);
                }
            }
            Ev::TaskDone {
                c,
                epoch,
                job,
                round,
                start,
            } => {
                if self.clients[c].epoch == epoch && self.clients[c].task == Some((job, round, start)) {
                    self.on_task_done(c, job, round, start, t);
                }
            }
            Ev::Submit { j } => self.on_submit(j, t),
            Ev::RequestTimeout { j, round } => {
                let job = &self.jobs[j];
                if job.round == round && !job.request_closed && !job.finished {
                    let id = job.id.expect("registered");
                    self.cp.job_manager().job_end_request(id, to_secs(t));
                    self.log.push(LogRecord::EndRequest { t, job: id, round });
                    self.jobs[j].request_closed = true;
                    self.maybe_close_round(j, t);
                }
            }
            Ev::FlushTick => {
                self.dp.flush_due(to_secs(t));
                self.q.push(t + from_secs(self.cfg.timing.flush_period), Ev::FlushTick);
            }
            Ev::SchedTick => self.on_sched_tick(t),
        }
    }

    /// Online, idle, and the event belongs to the current chain.
    fn live(&self, c: usize, epoch: u32) -> bool {
        let cl = &self.clients[c];
        cl.info.is_some() && cl.epoch == epoch && cl.task.is_none()
    }

    fn on_arrive(&mut self, c: usize, session: usize, t: Millis) {
        let rec = self.trace[session];
        let cl = &mut self.clients[c];
        cl.info = Some(rec.client_info());
        cl.session = session;
        cl.epoch += 1;
        self.log.push(LogRecord::ClientArrive {
            t,
            client: rec.client_id,
            public_attrs: rec.public_attrs.clone(),
            private_attrs: rec.private_attrs.clone(),
        });
        let end = from_secs(rec.avail_end).max(t);
        self.q.push(end, Ev::Depart { c, session });
        self.client_act(c, t);
    }

    fn on_depart(&mut self, c: usize, session: usize, t: Millis) {
        if self.clients[c].session != session || self.clients[c].info.is_none() {
            return;
        }
        let id = self.clients[c].id;
        if let Some((job, round, start)) = self.clients[c].task.take() {
            self.log.push(LogRecord::TaskFail {
                t,
                client: id,
                job,
                round,
                start,
            });
            self.cp.task_finished(id);
            let j = self.job_index[&job];
            self.jobs[j].outstanding -= 1;
            self.maybe_close_round(j, t);
        }
        let cl = &mut self.clients[c];
        cl.info = None;
        cl.epoch += 1;
        self.cp.shard_for(id).cache().remove(id);
        self.log.push(LogRecord::ClientDepart { t, client: id });
    }

    /// The client looks for work, starting at client-side time `t`.
    fn client_act(&mut self, c: usize, t: Millis) {
        let cl = &self.clients[c];
        if cl.info.is_none() || cl.task.is_some() || self.ended {
            return;
        }
        let epoch = cl.epoch;
        match self.cfg.mode {
            Mode::Online | Mode::Smallbatch => self.q.push(t + self.leg, Ev::Checkin { c, epoch }),
            Mode::PureRandom => match pick_uniform(&mut self.rng, &self.directory) {
                Some(job) => self.q.push(t + self.leg, Ev::Handshake { c, epoch, job }),
                None => self.q.push(t + self.backoff, Ev::Act { c, epoch }),
            },
            Mode::StaticPartition => {
                if let Some(job) = cl.static_job {
                    self.q.push(t + self.leg, Ev::Handshake { c, epoch, job });
                }
            }
        }
    }

    fn retry_later(&mut self, c: usize, t: Millis) {
        let epoch = self.clients[c].epoch;
        self.q.push(t + self.leg + self.backoff, Ev::Act { c, epoch });
    }

    fn on_checkin(&mut self, c: usize, t: Millis) {
        self.stats.checkins += 1;
        let info = self.clients[c].info.clone().expect("online");
        match self.cp.checkin(&info, to_secs(t)) {
            CheckInOutcome::Offers(resp) => self.consider_offers(c, &resp.offers, t),
            CheckInOutcome::Cached { expiry } => {
                let cl = &mut self.clients[c];
                cl.wait_token += 1;
                let (epoch, token) = (cl.epoch, cl.wait_token);
                let at = from_secs(expiry).max(t) + self.leg;
                self.q.push(at, Ev::CacheTimeout { c, epoch, token });
            }
            CheckInOutcome::Unavailable => {}
        }
    }

    /// Offers sent by the server at `t`; the client filters them on its
    /// private attributes and accepts in priority order.
    fn consider_offers(&mut self, c: usize, offers: &[TaskOffer], t: Millis) {
        let cl = &self.clients[c];
        let private = &cl.info.as_ref().expect("online").private_attrs;
        let mut ok: Vec<JobId> = offers
            .iter()
            .filter(|o| o.private_constraint.is_satisfied_by(private))
            .map(|o| o.job_id)
            .collect();
        if ok.is_empty() {
            self.retry_later(c, t);
            return;
        }
        let job = ok.remove(0);
        let epoch = cl.epoch;
        self.q.push(t + 2 * self.leg, Ev::Accept { c, epoch, job, rest: ok });
    }

    fn on_accept(&mut self, c: usize, job: JobId, mut rest: Vec<JobId>, t: Millis) {
        let id = self.clients[c].id;
        match self.cp.accept(id, job, to_secs(t)) {
            AcceptOutcome::Bound { round, demand_met, .. } => self.bind(c, job, round, demand_met, t),
            AcceptOutcome::Rejected(_) => {
                self.stats.rejected_accepts += 1;
                if rest.is_empty() {
                    self.retry_later(c, t);
                } else {
                    let next = rest.remove(0);
                    let epoch = self.clients[c].epoch;
                    self.q.push(t + 2 * self.leg, Ev::Accept { c, epoch, job: next, rest });
                }
            }
        }
    }

    /// A direct client-to-job request, as used by both baselines. The job
    /// checks every constraint itself.
    fn on_handshake(&mut self, c: usize, job: JobId, t: Millis) {
        self.stats.handshakes += 1;
        let j = self.job_index[&job];
        let store = self.cp.jobs().clone();
        let info = self.clients[c].info.as_ref().expect("online");
        let accepted = match store.get(job) {
            Some(rec) => {
                rec.has_open_slots()
                    && rec.public_constraint.is_satisfied_by(&info.public_attrs)
                    && rec.private_constraint.is_satisfied_by(&info.private_attrs)
                    && !self.jobs[j].served.contains(&c)
            }
            None => false,
        };
        if !accepted {
            self.retry_later(c, t);
            return;
        }
        match store.increment_amount(job) {
            Ok(amount) => {
                let rec = store.get(job).expect("exists");
                let met = amount >= rec.demand && self.cp.job_manager().demand_met(job, to_secs(t));
                self.jobs[j].served.insert(c);
                self.bind(c, job, rec.round, met, t);
            }
            Err(_) => self.retry_later(c, t),
        }
    }

    fn bind(&mut self, c: usize, job: JobId, round: u32, demand_met: bool, t: Millis) {
        let j = self.job_index[&job];
        let id = self.clients[c].id;
        self.log.push(LogRecord::Bound {
            t,
            client: id,
            job,
            round,
        });
        let sj = &mut self.jobs[j];
        sj.outstanding += 1;
        sj.last_progress = t;
        if demand_met {
            sj.request_closed = true;
            self.log.push(LogRecord::DemandMet { t, job, round });
        }
        let leaf = self.clients[c].leaf;
        let pulls = self
            .dp
            .fetch_plan(leaf, job, round, to_secs(t + self.leg))
            .map_or(0, |f| f.upstream_pulls);
        let info = self.clients[c].info.as_ref().expect("online");
        let transfer = self.cfg.data_plane.model_size / info.bandwidth;
        let compute = self.jobs[j].planned.spec.workload_per_client / info.speed;
        let legs = 1 + 2 * (1 + u64::from(pulls)) + 1;
        let duration = legs * self.leg + from_secs(2.0 * transfer + compute);
        let cl = &mut self.clients[c];
        cl.task = Some((job, round, t));
        let epoch = cl.epoch;
        self.q.push(
            t + duration,
            Ev::TaskDone {
                c,
                epoch,
                job,
                round,
                start: t,
            },
        );
    }

    fn on_task_done(&mut self, c: usize, job: JobId, round: u32, start: Millis, t: Millis) {
        let id = self.clients[c].id;
        self.log.push(LogRecord::TaskDone {
            t,
            client: id,
            job,
            round,
            start,
        });
        self.clients[c].task = None;
        self.cp.task_finished(id);
        let j = self.job_index[&job];
        let weight = self.clients[c]
            .info
            .as_ref()
            .and_then(|i| i.private_attrs.get("dataset_size"))
            .unwrap_or(1.0);
        let vector: Vec<f64> = self.jobs[j]
            .payload
            .iter()
            .map(|p| p + self.rng.random_range(-0.1..0.1))
            .collect();
        let leaf = self.clients[c].leaf;
        // late uploads are counted by the data plane
        let _ = self.dp.upload_result(leaf, job, round, Contribution { vector, weight });
        self.jobs[j].outstanding -= 1;
        self.maybe_close_round(j, t);
        self.client_act(c, t);
    }

    fn on_submit(&mut self, j: usize, t: Millis) {
        let spec = self.jobs[j].planned.spec.clone();
        let submitted = *self.jobs[j].submitted.get_or_insert(t);
        let ip = format!("10.0.{}.1", j % 256);
        let res = self
            .cp
            .job_manager()
            .job_regist(&spec, &ip, 9000 + (j % 1000) as u16, to_secs(t));
        let Some(id) = res.job_id else {
            self.log.push(LogRecord::AdmissionRejected {
                t,
                est_demand: spec.est_demand,
            });
            self.q.push(t + from_secs(self.cfg.timing.admission_retry), Ev::Submit { j });
            return;
        };
        self.jobs[j].id = Some(id);
        self.job_index.insert(id, j);
        self.directory.push(id);
        self.log.push(LogRecord::JobRegister {
            t,
            job: id,
            submitted,
            total_round: spec.total_round,
            est_demand: spec.est_demand,
            public_constraint: spec.public_constraint,
            private_constraint: spec.private_constraint,
        });
        if self.cfg.mode == Mode::StaticPartition {
            self.repartition(t);
        }
        self.start_round(j, t);
    }

    /// Recomputes the static assignment over all configured clients and
    /// wakes clients that just received their first assignment.
    fn repartition(&mut self, t: Millis) {
        let store = self.cp.jobs().clone();
        let records: Vec<_> = self.directory.iter().filter_map(|id| store.get(*id)).collect();
        let views: Vec<JobView<'_>> = records
            .iter()
            .map(|r| JobView {
                job_id: r.job_id,
                demand: self.jobs[self.job_index[&r.job_id]].planned.spec.est_demand,
                public_constraint: &r.public_constraint,
                private_constraint: &r.private_constraint,
            })
            .collect();
        let mut first_session: BTreeMap<ClientId, &TraceRecord> = BTreeMap::new();
        for r in &self.trace {
            first_session.entry(r.client_id).or_insert(r);
        }
        let clients: Vec<_> = first_session
            .values()
            .map(|r| (r.client_id, &r.public_attrs, &r.private_attrs))
            .collect();
        let assignment = static_partition(&clients, &views);
        let mut wake = Vec::new();
        for (c, cl) in self.clients.iter_mut().enumerate() {
            let new = assignment.get(&cl.id).copied();
            if cl.static_job.is_none() && new.is_some() {
                wake.push(c);
            }
            cl.static_job = new;
        }
        for c in wake {
            self.client_act(c, t);
        }
    }

    fn start_round(&mut self, j: usize, t: Millis) {
        let id = self.jobs[j].id.expect("registered");
        let demand = self.jobs[j].planned.spec.est_demand;
        let Some(round) = self.cp.job_manager().job_request(id, demand, to_secs(t)) else {
            self.finish_job(j, t);
            return;
        };
        let sj = &mut self.jobs[j];
        sj.round = round;
        sj.outstanding = 0;
        sj.request_closed = false;
        sj.served.clear();
        sj.last_progress = t;
        self.dp.publish_plan(ExecPlan {
            job_id: id,
            round,
            payload: sj.payload.clone(),
        });
        self.log.push(LogRecord::RoundStart {
            t,
            job: id,
            round,
            demand,
        });
        if let Some(timeout) = self.cfg.timing.request_timeout {
            self.q.push(t + from_secs(timeout), Ev::RequestTimeout { j, round });
        }
        if self.cfg.mode == Mode::Smallbatch {
            self.serve(t);
        }
    }

    fn maybe_close_round(&mut self, j: usize, t: Millis) {
        let sj = &self.jobs[j];
        if !sj.request_closed || sj.outstanding > 0 || sj.finished || sj.round == 0 {
            return;
        }
        let id = sj.id.expect("registered");
        let round = sj.round;
        self.dp.close_round(id, round);
        let count = match self.dp.get_round_result(id, round) {
            Ok(r) => {
                self.jobs[j].payload = r.result;
                r.count
            }
            Err(_) => 0,
        };
        self.dp.forget_round(id, round);
        self.log.push(LogRecord::RoundEnd { t, job: id, round, count });
        if round < self.jobs[j].planned.spec.total_round {
            self.start_round(j, t);
        } else {
            self.finish_job(j, t);
        }
    }

    fn finish_job(&mut self, j: usize, t: Millis) {
        let id = self.jobs[j].id.expect("registered");
        self.cp.job_manager().job_finish(id, to_secs(t));
        self.jobs[j].finished = true;
        self.log.push(LogRecord::JobFinish { t, job: id });
        if self.jobs.iter().all(|sj| sj.finished) {
            self.end_run(t, RunStatus::Completed, "all jobs finished".into());
        }
    }

    fn serve(&mut self, t: Millis) {
        for (client, resp) in self.cp.serve_partitions(to_secs(t)) {
            let Some(&c) = self.by_id.get(&client) else { continue };
            let cl = &mut self.clients[c];
            if cl.info.is_none() || cl.task.is_some() {
                continue;
            }
            cl.wait_token += 1;
            self.consider_offers(c, &resp.offers, t);
        }
    }

    fn on_sched_tick(&mut self, t: Millis) {
        if matches!(self.cfg.mode, Mode::Online | Mode::Smallbatch) {
            self.cp.tick(to_secs(t));
            if self.cfg.mode == Mode::Smallbatch {
                self.serve(t);
            }
        }
        let stall = from_secs(self.cfg.timing.stall_timeout);
        let stalled = self
            .jobs
            .iter()
            .find(|sj| sj.id.is_some() && !sj.finished && !sj.request_closed && t - sj.last_progress > stall);
        if let Some(sj) = stalled {
            let reason = format!("{} stalled in round {}", sj.id.expect("registered"), sj.round);
            self.end_run(t, RunStatus::Failed, reason);
            return;
        }
        self.q.push(t + from_secs(self.cfg.timing.sched_tick), Ev::SchedTick);
    }

    fn end_run(&mut self, t: Millis, status: RunStatus, reason: String) {
        if self.ended {
            return;
        }
        for cl in &mut self.clients {
            if let Some((job, round, start)) = cl.task.take() {
                self.log.push(LogRecord::TaskFail {
                    t,
                    client: cl.id,
                    job,
                    round,
                    start,
                });
            }
        }
        self.log.push(LogRecord::RunEnd { t, status, reason });
        self.ended = true;
    }
}
