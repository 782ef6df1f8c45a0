//! Wires the job store, client windows, scheduler, job manager and sharded
//! client managers into one control plane with message entry points.

use std::sync::Arc;

use crate::client_manager::{
    AcceptOutcome, Binding, CheckInOutcome, CheckInResponse, ClientManager, ClientManagerConfig, ShardRouter,
};
use crate::domain::{ClientId, ClientInfo, JobSpec, Seconds};
use crate::job_manager::{AdmissionConfig, JobManager};
use crate::messages::{AcceptStatus, ClientMessage, ClientReply, JobMessage, JobReply, OfferMsg};
use crate::scheduler::{ClientDb, PolicyPlugin, Scheduler, SchedulingMode};
use crate::store::{ClientCache, ClientWindowStore, JobStore, WindowConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlPlaneConfig {
    pub shards: usize,
    pub window: WindowConfig,
    pub cache_ttl: Seconds,
    pub admission: AdmissionConfig,
    pub client_manager: ClientManagerConfig,
}

impl Default for ControlPlaneConfig {
    fn default() -> Self {
        Self {
            shards: 1,
            window: WindowConfig::default(),
            cache_ttl: crate::store::DEFAULT_CACHE_TTL_SECS,
            admission: AdmissionConfig::default(),
            client_manager: ClientManagerConfig::default(),
        }
    }
}

pub struct ControlPlane {
    jobs: Arc<JobStore>,
    scheduler: Arc<Scheduler>,
    job_manager: Arc<JobManager>,
    router: ShardRouter<ClientManager>,
}

impl ControlPlane {
    pub fn new(config: ControlPlaneConfig, policy: Box<dyn PolicyPlugin>, started_at: Seconds) -> Self {
        let shards = config.shards.max(1);
        let jobs = Arc::new(JobStore::new());
        let windows: Vec<Arc<ClientWindowStore>> = (0..shards)
            .map(|_| Arc::new(ClientWindowStore::new(config.window)))
            .collect();
        let db = ClientDb::new(windows.clone());
        let scheduler = Arc::new(Scheduler::new(jobs.clone(), db.clone(), policy));
        let job_manager = Arc::new(JobManager::new(
            jobs.clone(),
            db,
            scheduler.clone(),
            config.admission,
            started_at,
        ));
        let managers = windows
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                ClientManager::new(
                    i,
                    config.client_manager,
                    job_manager.clone(),
                    scheduler.clone(),
                    w,
                    ClientCache::new(config.cache_ttl),
                )
            })
            .collect();
        Self {
            jobs,
            scheduler,
            job_manager,
            router: ShardRouter::new(managers),
        }
    }

    pub fn jobs(&self) -> &Arc<JobStore> {
        &self.jobs
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    pub fn job_manager(&self) -> &Arc<JobManager> {
        &self.job_manager
    }

    pub fn shards(&self) -> &[ClientManager] {
        self.router.shards()
    }

    pub fn shard_for(&self, client: ClientId) -> &ClientManager {
        self.router.shard_for(client)
    }

    pub fn mode(&self) -> SchedulingMode {
        self.scheduler.mode()
    }

    pub fn checkin(&self, info: &ClientInfo, now: Seconds) -> CheckInOutcome {
        self.shard_for(info.client_id).client_checkin(info, now)
    }

    pub fn accept(&self, client: ClientId, job: crate::domain::JobId, now: Seconds) -> AcceptOutcome {
        self.shard_for(client).client_accept(client, job, now)
    }

    pub fn task_finished(&self, client: ClientId) -> bool {
        self.shard_for(client).task_finished(client)
    }

    pub fn tick(&self, now: Seconds) {
        for s in self.router.shards() {
            s.window().evict(now);
        }
        self.scheduler.on_tick(now);
    }

    /// Matches cached clients on every shard against the current partition.
    pub fn serve_partitions(&self, now: Seconds) -> Vec<(ClientId, CheckInResponse)> {
        let Some(partition) = self.scheduler.board().current() else {
            return Vec::new();
        };
        self.router
            .shards()
            .iter()
            .flat_map(|s| s.serve_partition(&partition, now))
            .collect()
    }

    /// Every binding committed so far, ordered by time then client.
    pub fn bindings(&self) -> Vec<Binding> {
        let mut all: Vec<Binding> = self.router.shards().iter().flat_map(|s| s.bindings()).collect();
        all.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.client_id.cmp(&b.client_id)));
        all
    }

    pub fn handle_job(&self, msg: JobMessage, now: Seconds) -> JobReply {
        match msg {
            JobMessage::JobRegist {
                total_round,
                est_demand,
                public_constraint,
                private_constraint,
                job_ip,
                port,
            } => {
                let spec = JobSpec {
                    total_round,
                    est_demand,
                    public_constraint,
                    private_constraint,
                    workload_per_client: 1.0,
                };
                let r = self.job_manager.job_regist(&spec, &job_ip, port, now);
                JobReply::Regist {
                    ack: r.ack,
                    job_id: r.job_id,
                }
            }
            JobMessage::JobRequest { job_id, demand } => JobReply::Ack {
                ack: self.job_manager.job_request(job_id, demand, now).is_some(),
            },
            JobMessage::JobEndRequest { job_id } => JobReply::Ack {
                ack: self.job_manager.job_end_request(job_id, now),
            },
            JobMessage::JobFinish { job_id } => JobReply::Ack {
                ack: self.job_manager.job_finish(job_id, now),
            },
        }
    }

    pub fn handle_client(&self, msg: ClientMessage, now: Seconds) -> ClientReply {
        match msg {
            ClientMessage::ClientCheckin {
                client_id,
                public_attrs,
            } => {
                let offers = match self.shard_for(client_id).check_in_public(client_id, public_attrs, now) {
                    CheckInOutcome::Offers(r) => r.offers.iter().map(OfferMsg::from).collect(),
                    CheckInOutcome::Cached { .. } | CheckInOutcome::Unavailable => Vec::new(),
                };
                ClientReply::Checkin { offers }
            }
            ClientMessage::ClientAccept { client_id, job_id } => match self.accept(client_id, job_id, now) {
                AcceptOutcome::Bound { job_ip, port, .. } => ClientReply::Accept {
                    status: AcceptStatus::Bound,
                    job_ip: Some(job_ip),
                    port: Some(port),
                    reason: None,
                },
                AcceptOutcome::Rejected(reason) => ClientReply::Accept {
                    status: AcceptStatus::Rejected,
                    job_ip: None,
                    port: None,
                    reason: Some(reason),
                },
            },
            ClientMessage::ClientPing { client_id } => ClientReply::Ping {
                task_status: self.shard_for(client_id).client_ping(client_id),
            },
        }
    }
}
