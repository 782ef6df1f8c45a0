//! Comparison strategies without a control plane: a fixed client-to-job
//! partition, and clients that pick jobs uniformly at random.

use std::collections::BTreeMap;

use rand::Rng;

use crate::domain::{AttributeMap, ClientId, Constraint, JobId};

/// What a baseline job server knows about a job.
#[derive(Clone, Debug)]
pub struct JobView<'a> {
    pub job_id: JobId,
    pub demand: u32,
    pub public_constraint: &'a Constraint,
    pub private_constraint: &'a Constraint,
}

impl JobView<'_> {
    /// Baseline job servers see the client's full attribute set.
    pub fn admits(&self, public: &AttributeMap, private: &AttributeMap) -> bool {
        self.public_constraint.is_satisfied_by(public) && self.private_constraint.is_satisfied_by(private)
    }
}

/// Splits `total` into parts proportional to `weights` by the largest
/// remainder method. Ties on remainder go to the lower index.
pub fn largest_remainder(total: usize, weights: &[u32]) -> Vec<usize> {
    let sum: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total = total as u64;
    let mut parts: Vec<usize> = weights
        .iter()
        .map(|&w| (total * u64::from(w) / sum) as usize)
        .collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainder of w*total/sum, compared exactly as integers
    order.sort_by(|&a, &b| {
        let ra = total * u64::from(weights[a]) % sum;
        let rb = total * u64::from(weights[b]) % sum;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total as usize - assigned) {
        parts[i] += 1;
    }
    parts
}

/// Assigns every client eligible for at least one job to exactly one job.
/// Targets are proportional to per-round demand over the eligible
/// population. Clients with fewer options are placed first, each on the
/// eligible job with the largest unfilled fraction of its target.
pub fn static_partition(
    clients: &[(ClientId, &AttributeMap, &AttributeMap)],
    jobs: &[JobView<'_>],
) -> BTreeMap<ClientId, JobId> {
    let eligible: Vec<(ClientId, Vec<usize>)> = clients
        .iter()
        .map(|(id, public, private)| {
            let ok = (0..jobs.len()).filter(|&j| jobs[j].admits(public, private)).collect();
            (*id, ok)
        })
        .filter(|(_, ok): &(ClientId, Vec<usize>)| !ok.is_empty())
        .collect();
    let demands: Vec<u32> = jobs.iter().map(|j| j.demand).collect();
    let targets = largest_remainder(eligible.len(), &demands);
    let mut order: Vec<&(ClientId, Vec<usize>)> = eligible.iter().collect();
    order.sort_by(|a, b| a.1.len().cmp(&b.1.len()).then(a.0.cmp(&b.0)));
    let mut assigned = vec![0usize; jobs.len()];
    let mut out = BTreeMap::new();
    for (client, ok) in order {
        // most room left relative to target; zero-target jobs come last
        let room = |j: usize| {
            if targets[j] == 0 {
                f64::NEG_INFINITY
            } else {
                (targets[j] as f64 - assigned[j] as f64) / targets[j] as f64
            }
        };
        let &j = ok
            .iter()
            .max_by(|&&a, &&b| room(a).total_cmp(&room(b)).then(b.cmp(&a)))
            .expect("non-empty");
        assigned[j] += 1;
        out.insert(*client, jobs[j].job_id);
    }
    out
}

/// Uniform choice from the job directory.
pub fn pick_uniform<R: Rng>(rng: &mut R, directory: &[JobId]) -> Option<JobId> {
    if directory.is_empty() {
        None
    } else {
        Some(directory[rng.random_range(0..directory.len())])
    }
}
