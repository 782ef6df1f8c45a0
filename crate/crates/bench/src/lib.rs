//! Fixtures shared by the control-plane and data-plane benchmarks.

use fedpool_core::{
    AttributeMap, ClientId, ClientInfo, Constraint, ControlPlane, ControlPlaneConfig, Contribution, DataPlane,
    DataPlaneConfig, ExecPlan, FedAvg, JobId, JobSpec, PolicyKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A client with a random `cpu_f` in `[1, 3)`, online for the whole run.
pub fn client(id: u64, rng: &mut ChaCha8Rng) -> ClientInfo {
    ClientInfo {
        client_id: ClientId(id),
        public_attrs: AttributeMap::from_pairs([("cpu_f", rng.random_range(1.0..3.0))]).expect("finite"),
        private_attrs: AttributeMap::default(),
        avail_start: 0.0,
        avail_end: 1e9,
        speed: 1.0,
        bandwidth: 1.0,
    }
}

/// A control plane with `clients` checked in and `jobs` requesting jobs
/// whose constraints fall into `groups` distinct signatures.
pub fn control_plane(policy: PolicyKind, jobs: usize, groups: usize, clients: u64, seed: u64) -> ControlPlane {
    let mut cfg = ControlPlaneConfig::default();
    cfg.admission.cap_fraction = f64::INFINITY;
    let cp = ControlPlane::new(cfg, policy.build(seed), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..clients {
        cp.checkin(&client(id, &mut rng), 0.0);
    }
    for i in 0..jobs {
        let bound = 1.0 + (i % groups.max(1)) as f64 * 2.0 / groups.max(1) as f64;
        let spec = JobSpec {
            total_round: 1_000_000,
            est_demand: 1_000_000,
            public_constraint: Constraint::from_pairs([("cpu_f", bound)]).expect("finite"),
            private_constraint: Constraint::none(),
            workload_per_client: 1.0,
        };
        let id = cp.job_manager().job_regist(&spec, "10.0.0.1", 9000, 0.0).job_id.expect("admitted");
        cp.job_manager().job_request(id, 1_000_000, 0.0).expect("requesting");
    }
    cp
}

/// Parent list of a complete tree with the given fan-out and depth.
pub fn complete_tree(fanout: usize, depth: usize) -> Vec<Option<usize>> {
    let mut parents = vec![None];
    let mut level = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &p in &level {
            for _ in 0..fanout {
                next.push(parents.len());
                parents.push(Some(p));
            }
        }
        level = next;
    }
    parents
}

/// A data plane with a published round-1 plan of dimension `dim` for job 1.
pub fn data_plane(parents: &[Option<usize>], dim: usize) -> DataPlane {
    let mut dp = DataPlane::new(FedAvg, parents, DataPlaneConfig::default()).expect("valid tree");
    dp.publish_plan(ExecPlan {
        job_id: JobId(1),
        round: 1,
        payload: vec![0.0; dim],
    });
    dp
}

pub fn contributions(n: usize, dim: usize, seed: u64) -> Vec<Contribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Contribution {
            vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            weight: rng.random_range(1.0..100.0),
        })
        .collect()
}
