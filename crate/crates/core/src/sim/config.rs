//! Experiment configuration, loaded from TOML.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_plane::{AggregationMode, DataPlaneConfig};
use crate::domain::{Constraint, JobSpec, Seconds};
use crate::error::SimError;
use crate::scheduler::{PolicyKind, SchedulingMode};
use crate::sim::events::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Clients with id below this value are taken from the trace.
    pub num_clients: usize,
    pub mode: Mode,
    /// Scheduling policy for the `online` and `smallbatch` modes.
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub control: ControlSettings,
    #[serde(default)]
    pub data_plane: DataPlaneSettings,
    /// Job classes; `count` jobs are drawn from each with the run seed.
    #[serde(default)]
    pub tiers: Vec<TierSpec>,
    /// Fixed jobs, added after the drawn ones.
    #[serde(default)]
    pub jobs: Vec<FixedJob>,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Random
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    /// One-way latency of every simulated message.
    pub leg_ms: u64,
    /// Wait before a client that found no work tries again.
    pub backoff: Seconds,
    pub sched_tick: Seconds,
    pub flush_period: Seconds,
    pub admission_retry: Seconds,
    /// A requesting job without a new binding for this long fails the run.
    pub stall_timeout: Seconds,
    /// Hard stop; defaults to the end of the trace.
    pub horizon: Option<Seconds>,
    /// Jobs end a request this long after it opened, if set.
    pub request_timeout: Option<Seconds>,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            leg_ms: 50,
            backoff: 15.0,
            sched_tick: 10.0,
            flush_period: 5.0,
            admission_retry: 60.0,
            stall_timeout: 3600.0,
            horizon: None,
            request_timeout: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSettings {
    pub shards: usize,
    pub offers_per_checkin: usize,
    pub offer_validity: Seconds,
    pub window: Seconds,
    pub window_capacity: usize,
    pub cache_ttl: Seconds,
    pub admission_cap_fraction: f64,
    pub admission_grace: Seconds,
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self {
            shards: 1,
            offers_per_checkin: 3,
            offer_validity: 10.0,
            window: crate::store::DEFAULT_WINDOW_SECS,
            window_capacity: crate::store::DEFAULT_WINDOW_CAPACITY,
            cache_ttl: crate::store::DEFAULT_CACHE_TTL_SECS,
            admission_cap_fraction: 0.25,
            admission_grace: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPlaneSettings {
    /// Parent of each node; `-1` marks the root.
    pub parents: Vec<i64>,
    pub ttl: Seconds,
    pub cache_capacity: usize,
    /// Length of the simulated model vector.
    pub model_dim: usize,
    /// Transfer size of a plan or an update, in MB.
    pub model_size: f64,
    pub mode: AggregationMode,
}

impl Default for DataPlaneSettings {
    fn default() -> Self {
        Self {
            parents: vec![-1, 0, 0, 1, 1, 2, 2],
            ttl: 60.0,
            cache_capacity: 64,
            model_dim: 8,
            model_size: 10.0,
            mode: AggregationMode::Offload,
        }
    }
}

impl DataPlaneSettings {
    pub fn parent_list(&self) -> Result<Vec<Option<usize>>, SimError> {
        self.parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(SimError::Config(format!("invalid parent index {p}"))),
            })
            .collect()
    }

    pub fn config(&self, flush_period: Seconds) -> DataPlaneConfig {
        DataPlaneConfig {
            ttl: self.ttl,
            flush_period,
            cache_capacity: self.cache_capacity,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub name: String,
    pub count: usize,
    #[serde(default)]
    pub public_constraint: Constraint,
    #[serde(default)]
    pub private_constraint: Constraint,
    /// Inclusive range of per-round demand.
    pub demand: [u32; 2],
    /// Inclusive range of round counts.
    pub rounds: [u32; 2],
    /// Half-open range of per-client workload units.
    pub workload: [f64; 2],
    #[serde(default)]
    pub arrival: Seconds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedJob {
    #[serde(flatten)]
    pub spec: JobSpec,
    #[serde(default)]
    pub arrival: Seconds,
}

/// A job to submit at `arrival`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedJob {
    pub spec: JobSpec,
    pub arrival: Seconds,
    pub tier: String,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.num_clients == 0 {
            return bad("num_clients must be positive".into());
        }
        match (self.mode, self.policy.build(0).mode()) {
            (Mode::Online, SchedulingMode::SmallBatch) => {
                return bad(format!("policy {:?} needs mode smallbatch", self.policy));
            }
            (Mode::Smallbatch, SchedulingMode::Online) => {
                return bad(format!("policy {:?} needs mode online", self.policy));
            }
            _ => {}
        }
        for t in &self.tiers {
            if t.demand[0] == 0 || t.demand[0] > t.demand[1] {
                return bad(format!("tier {}: bad demand range", t.name));
            }
            if t.rounds[0] == 0 || t.rounds[0] > t.rounds[1] {
                return bad(format!("tier {}: bad rounds range", t.name));
            }
            if !(t.workload[0] > 0.0 && t.workload[0] <= t.workload[1]) {
                return bad(format!("tier {}: bad workload range", t.name));
            }
        }
        for j in &self.jobs {
            j.spec.validate().map_err(|e| SimError::Config(e.to_string()))?;
        }
        if self.tiers.iter().map(|t| t.count).sum::<usize>() + self.jobs.len() == 0 {
            return bad("no jobs configured".into());
        }
        if self.timing.leg_ms == 0 {
            return bad("leg_ms must be positive".into());
        }
        let positive = [
            self.timing.backoff,
            self.timing.sched_tick,
            self.timing.flush_period,
            self.timing.admission_retry,
            self.timing.stall_timeout,
        ];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("timing values must be positive".into());
        }
        if self.data_plane.model_dim == 0 {
            return bad("model_dim must be positive".into());
        }
        crate::data_plane::validate_tree(&self.data_plane.parent_list()?)?;
        Ok(())
    }

    /// Draws the job mix. Depends only on the seed and the tiers, so every
    /// mode of a comparison sees the same jobs.
    pub fn planned_jobs(&self) -> Vec<PlannedJob> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x006a_6f62_5f6d_6978);
        let mut out = Vec::new();
        for tier in &self.tiers {
            for _ in 0..tier.count {
                let est_demand = rng.random_range(tier.demand[0]..=tier.demand[1]);
                let total_round = rng.random_range(tier.rounds[0]..=tier.rounds[1]);
                let workload = if tier.workload[0] < tier.workload[1] {
                    rng.random_range(tier.workload[0]..tier.workload[1])
                } else {
                    tier.workload[0]
                };
                out.push(PlannedJob {
                    spec: JobSpec {
                        total_round,
                        est_demand,
                        public_constraint: tier.public_constraint.clone(),
                        private_constraint: tier.private_constraint.clone(),
                        workload_per_client: (workload * 1000.0).round() / 1000.0,
                    },
                    arrival: tier.arrival,
                    tier: tier.name.clone(),
                });
            }
        }
        out.extend(self.jobs.iter().map(|j| PlannedJob {
            spec: j.spec.clone(),
            arrival: j.arrival,
            tier: "fixed".into(),
        }));
        out
    }
}
