//! Scheduler, job manager and client manager behavior through the wired
//! control plane.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;

use common::{attrs, client, constraint, spec};
use fedpool_core::client_manager::{is_rank_sorted, route, ClientManagerConfig, RejectReason};
use fedpool_core::scheduler::{ClientDb, FieldValue, JobGroup, PartitionBoard, SchedulerApi};
use fedpool_core::{
    AcceptOutcome, AdmissionConfig, CheckInOutcome, ClientId, ControlPlane, ControlPlaneConfig, JobId, JobState, PolicyKind,
    PolicyPlugin, Query, Seconds, SchedulingMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Admission is tested on its own; elsewhere tiny windows must not reject jobs.
fn open_config() -> ControlPlaneConfig {
    ControlPlaneConfig {
        admission: AdmissionConfig {
            cap_fraction: 1e9,
            ..AdmissionConfig::default()
        },
        ..ControlPlaneConfig::default()
    }
}

fn plane(policy: PolicyKind, seed: u64) -> ControlPlane {
    ControlPlane::new(open_config(), policy.build(seed), 0.0)
}

fn offers(cp: &ControlPlane, id: u64, public: &[(&str, f64)], now: Seconds) -> Vec<JobId> {
    match cp.checkin(&client(id, public, &[]), now) {
        CheckInOutcome::Offers(r) => r.offers.iter().map(|o| o.job_id).collect(),
        other => panic!("expected offers, got {other:?}"),
    }
}

fn register(cp: &ControlPlane, demand: u32, public: &[(&str, f64)], now: Seconds) -> JobId {
    cp.job_manager()
        .job_regist(&spec(demand, 5, public, &[]), "10.0.0.9", 7000, now)
        .job_id
        .expect("admitted")
}

// ---------------------------------------------------------------------------
// scheduler policies

#[test]
fn fifo_ranks_fifty_random_registrations_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cp = plane(PolicyKind::Fifo, 0);
    let mut t = 0.0;
    let mut registered = Vec::new();
    for _ in 0..50 {
        // equal times happen, and then the job id breaks the tie
        if rng.random_bool(0.7) {
            t += rng.random_range(0.0..1.0);
        }
        let job = register(&cp, 1, &[], t);
        cp.job_manager().job_request(job, 1, t).unwrap();
        registered.push(job);
    }
    assert_eq!(cp.jobs().query(&Query::all()), registered);
}

#[test]
fn random_policy_ranks_each_job_first_a_quarter_of_the_time() {
    let cp = plane(PolicyKind::Random, 99);
    let jobs: Vec<JobId> = (0..4).map(|_| register(&cp, 1, &[], 0.0)).collect();
    for &j in &jobs {
        cp.job_manager().job_request(j, 1, 0.0).unwrap();
    }
    let trials = 10_000;
    let mut first = BTreeMap::new();
    for _ in 0..trials {
        for &j in &jobs {
            cp.scheduler().on_job_request(j);
        }
        *first.entry(cp.jobs().query(&Query::all())[0]).or_insert(0usize) += 1;
    }
    for j in jobs {
        let f = first.get(&j).copied().unwrap_or(0) as f64 / trials as f64;
        assert!((f - 0.25).abs() <= 0.02, "{j}: {f}");
    }
}

#[test]
fn rarity_score_is_one_minus_eligible_share() {
    let cp = plane(PolicyKind::Rarity, 0);
    for i in 0..10 {
        let cpu = if i < 4 { 4.0 } else { 1.0 };
        offers(&cp, i, &[("cpu", cpu)], 0.0);
    }
    let job = register(&cp, 1, &[("cpu", 4.0)], 0.0);
    cp.job_manager().job_request(job, 1, 0.0).unwrap();
    assert!((cp.jobs().get(job).unwrap().score - 0.6).abs() < 1e-12);
}

/// Tries every read path and writes a score; nothing else can change.
struct Nosy;

impl PolicyPlugin for Nosy {
    fn name(&self) -> &'static str {
        "nosy"
    }
    fn mode(&self) -> SchedulingMode {
        SchedulingMode::Online
    }
    fn on_job_request(&mut self, api: &SchedulerApi<'_>, job: JobId) {
        assert!(api.exist(job));
        assert!(api.get_job_size() >= 1);
        for f in ["demand", "amount", "round", "state", "job_ip", "public_constraint", "score"] {
            assert!(api.get_field(job, f).is_ok(), "{f}");
        }
        assert_eq!(api.get_field(job, "demand").unwrap(), FieldValue::Number(4.0));
        assert!(api.query("demand >= 1").unwrap().contains(&job));
        let _ = api.get_client_size();
        let _ = api.get_client_proportion(&constraint(&[("cpu", 1.0)]));
        let _ = api.get_client_subset_size("cpu >= 1").unwrap();
        api.set_score(42.0, job).unwrap();
    }
}

#[test]
fn plugins_can_only_write_scores() {
    let cp = ControlPlane::new(ControlPlaneConfig::default(), Box::new(Nosy), 0.0);
    let job = register(&cp, 4, &[("cpu", 1.0)], 0.0);
    let before = cp.jobs().get(job).unwrap();
    cp.job_manager().job_request(job, 4, 1.0).unwrap();
    let after = cp.jobs().get(job).unwrap();
    assert_eq!(after.score, 42.0);
    assert_eq!(after.demand, 4);
    assert_eq!(after.amount, 0);
    assert_eq!(after.round, 1);
    assert_eq!(after.public_constraint, before.public_constraint);
    assert_eq!(after.private_constraint, before.private_constraint);
    assert_eq!(after.state, JobState::Requesting);
}

#[test]
fn small_batch_plugins_cannot_write_scores() {
    let jobs = fedpool_core::JobStore::new();
    jobs.put(common::record(1, 0.0, 0.0));
    let db = ClientDb::default();
    let api = SchedulerApi::new(&jobs, &db, SchedulingMode::SmallBatch);
    assert!(api.set_score(1.0, JobId(1)).is_err());
    assert_eq!(jobs.get(JobId(1)).unwrap().score, 0.0);
}

#[test]
fn partition_publication_is_atomic() {
    let board = Arc::new(PartitionBoard::default());
    let group = |tag: f64, id: u32| JobGroup {
        group_id: id,
        members: vec![JobId(id)],
        client_query: format!("cpu >= {tag}").parse().unwrap(),
    };
    let snapshot = |tag: f64| (0..8).map(|i| group(tag, i)).collect::<Vec<_>>();
    let done = AtomicBool::new(false);
    thread::scope(|s| {
        s.spawn(|| {
            for i in 0..5_000 {
                board.publish(snapshot(f64::from(i % 2)));
            }
            done.store(true, Ordering::Release);
        });
        for _ in 0..3 {
            s.spawn(|| {
                let mut last_epoch = 0;
                while !done.load(Ordering::Acquire) {
                    if let Some(p) = board.current() {
                        let first = &p.groups[0].client_query;
                        assert!(p.groups.iter().all(|g| &g.client_query == first), "mixed snapshot");
                        assert_eq!(p.groups.len(), 8);
                        assert!(p.epoch >= last_epoch);
                        last_epoch = p.epoch;
                    }
                }
            });
        }
    });
}

#[test]
fn small_batch_falls_back_to_offers_before_any_partition() {
    let cp = plane(PolicyKind::FairshareSmallbatch, 0);
    assert!(cp.scheduler().board().current().is_none());
    assert!(matches!(cp.checkin(&client(1, &[], &[]), 0.0), CheckInOutcome::Offers(_)));
    let job = register(&cp, 1, &[], 0.0);
    cp.job_manager().job_request(job, 1, 0.0).unwrap();
    assert!(matches!(cp.checkin(&client(2, &[], &[]), 0.0), CheckInOutcome::Cached { .. }));
}

// ---------------------------------------------------------------------------
// job manager

#[test]
fn admission_cap_tracks_window_size() {
    let cp = ControlPlane::new(ControlPlaneConfig::default(), PolicyKind::Fifo.build(0), 0.0);
    for i in 0..1000 {
        offers(&cp, i, &[], 1.0);
    }
    let jm = cp.job_manager();
    // cap = 0.25 x 1000 = 250
    assert!(jm.job_regist(&spec(10, 1, &[], &[]), "h", 1, 2.0).ack);
    assert!(jm.job_regist(&spec(250, 1, &[], &[]), "h", 1, 2.0).ack);
    let before = cp.jobs().len();
    let r = jm.job_regist(&spec(251, 1, &[], &[]), "h", 1, 2.0);
    assert!(!r.ack && r.job_id.is_none());
    assert_eq!(cp.jobs().len(), before);
}

#[test]
fn bootstrap_grace_admits_until_clients_arrive() {
    let cp = ControlPlane::new(ControlPlaneConfig::default(), PolicyKind::Fifo.build(0), 0.0);
    let jm = cp.job_manager();
    assert!(jm.job_regist(&spec(10, 1, &[], &[]), "h", 1, 0.0).ack);
    assert!(jm.job_regist(&spec(10_000, 1, &[], &[]), "h", 1, 59.0).ack);
    // empty window after the grace period: cap is zero
    assert!(!jm.job_regist(&spec(1, 1, &[], &[]), "h", 1, 61.0).ack);
    // duplicate endpoints register as distinct jobs
    let cp = plane(PolicyKind::Fifo, 0);
    let a = cp.job_manager().job_regist(&spec(1, 1, &[], &[]), "h", 1, 0.0).job_id;
    let b = cp.job_manager().job_regist(&spec(1, 1, &[], &[]), "h", 1, 0.0).job_id;
    assert_ne!(a, b);
}

#[derive(Clone, Debug)]
enum JobOp {
    Request(u32),
    Bind,
    End,
    Finish,
    Wait(f64),
}

fn job_op() -> impl Strategy<Value = JobOp> {
    prop_oneof![
        2 => (0u32..5).prop_map(JobOp::Request),
        4 => Just(JobOp::Bind),
        1 => Just(JobOp::End),
        1 => Just(JobOp::Finish),
        2 => (0.0f64..10.0).prop_map(JobOp::Wait),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn job_lifecycle_follows_the_state_machine(ops in proptest::collection::vec(job_op(), 1..60), rounds in 1u32..5) {
        let cp = plane(PolicyKind::Fifo, 0);
        let jm = cp.job_manager();
        let job = jm.job_regist(&spec(3, rounds, &[], &[]), "h", 1, 0.0).job_id.unwrap();
        let mut now = 0.0;
        // model
        let mut state = JobState::Registered;
        let (mut round, mut demand, mut amount, mut start) = (0u32, 0u32, 0u32, 0.0);
        let (mut sched, mut attained) = (0.0f64, 0u64);
        for op in ops {
            let prev = state;
            match op {
                JobOp::Wait(dt) => now += dt,
                JobOp::Request(d) => {
                    let ok = jm.job_request(job, d, now).is_some();
                    let want = d > 0 && matches!(state, JobState::Registered | JobState::Executing) && round < rounds;
                    prop_assert_eq!(ok, want);
                    if want {
                        round += 1;
                        demand = d;
                        amount = 0;
                        start = now;
                        state = JobState::Requesting;
                    }
                }
                JobOp::Bind => {
                    let ok = cp.jobs().increment_amount(job).is_ok();
                    let want = state == JobState::Requesting && amount < demand;
                    prop_assert_eq!(ok, want);
                    if want {
                        amount += 1;
                        if amount == demand {
                            prop_assert!(jm.demand_met(job, now));
                            state = JobState::Executing;
                            sched += now - start;
                            attained += u64::from(amount);
                        }
                    }
                }
                JobOp::End => {
                    let ok = jm.job_end_request(job, now);
                    prop_assert_eq!(ok, state == JobState::Requesting);
                    if ok {
                        state = JobState::Executing;
                        sched += now - start;
                        attained += u64::from(amount);
                    }
                }
                JobOp::Finish => {
                    let ok = jm.job_finish(job, now);
                    prop_assert_eq!(ok, state != JobState::Finished);
                    if ok {
                        if state == JobState::Requesting {
                            sched += now - start;
                            attained += u64::from(amount);
                        }
                        state = JobState::Finished;
                    }
                }
            }
            let legal = prev == state
                || matches!(
                    (prev, state),
                    (JobState::Registered, JobState::Requesting)
                        | (JobState::Requesting, JobState::Executing)
                        | (JobState::Executing, JobState::Requesting)
                        | (_, JobState::Finished)
                );
            prop_assert!(legal, "{:?} -> {:?}", prev, state);
            let r = cp.jobs().get(job).unwrap();
            prop_assert_eq!(r.state, state);
            prop_assert_eq!(r.round, round);
            prop_assert!(r.amount <= r.demand && r.round <= r.total_round);
            prop_assert_eq!(r.attained_service, attained);
            prop_assert!((r.total_sched - sched).abs() < 1e-9);
            prop_assert_eq!(r.total_demand, 3 * u64::from(rounds));
        }
    }
}

// ---------------------------------------------------------------------------
// client manager

#[test]
fn top_k_offers_follow_scores() {
    let cp = ControlPlane::new(
        ControlPlaneConfig {
            client_manager: ClientManagerConfig {
                offers_per_checkin: 2,
                ..ClientManagerConfig::default()
            },
            ..open_config()
        },
        PolicyKind::Fifo.build(0),
        0.0,
    );
    let jobs: Vec<JobId> = (0..3).map(|_| register(&cp, 2, &[], 0.0)).collect();
    for (&j, score) in jobs.iter().zip([5.0, 3.0, 1.0]) {
        cp.job_manager().job_request(j, 2, 0.0).unwrap();
        cp.jobs().set_score(j, score);
    }
    assert_eq!(offers(&cp, 1, &[], 1.0), vec![jobs[0], jobs[1]]);
    // reversing the scores reverses the offers
    for (&j, score) in jobs.iter().zip([1.0, 3.0, 5.0]) {
        cp.jobs().set_score(j, score);
    }
    assert_eq!(offers(&cp, 2, &[], 1.0), vec![jobs[2], jobs[1]]);
}

#[test]
fn offers_are_sorted_eligible_and_open() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let cp = plane(PolicyKind::Random, rng.random());
        let mut jobs = Vec::new();
        for _ in 0..rng.random_range(1..8) {
            let need = rng.random_range(0..4) as f64;
            let j = register(&cp, 3, &[("cpu", need)], 0.0);
            if rng.random_bool(0.7) {
                cp.job_manager().job_request(j, rng.random_range(1..3), 0.0).unwrap();
            }
            jobs.push(j);
        }
        let cpu = rng.random_range(0..4) as f64;
        let info = client(1, &[("cpu", cpu)], &[]);
        let CheckInOutcome::Offers(resp) = cp.checkin(&info, 1.0) else {
            panic!("online check-in");
        };
        assert!(resp.offers.len() <= 3);
        assert!(is_rank_sorted(&resp.offers, cp.jobs()));
        let ids: BTreeSet<JobId> = resp.offers.iter().map(|o| o.job_id).collect();
        assert_eq!(ids.len(), resp.offers.len());
        for o in &resp.offers {
            let r = cp.jobs().get(o.job_id).unwrap();
            assert!(r.has_open_slots() && r.public_constraint.is_satisfied_by(&info.public_attrs));
        }
        // when fewer than k offers came back, nothing eligible was left out
        if resp.offers.len() < 3 {
            let eligible = jobs
                .iter()
                .filter_map(|j| cp.jobs().get(*j))
                .filter(|r| r.has_open_slots() && r.public_constraint.is_satisfied_by(&info.public_attrs))
                .count();
            assert_eq!(eligible, resp.offers.len());
        }
    }
}

#[test]
fn ineligible_client_gets_no_offers() {
    let cp = plane(PolicyKind::Fifo, 0);
    let j = register(&cp, 1, &[("cpu", 4.0)], 0.0);
    cp.job_manager().job_request(j, 1, 0.0).unwrap();
    assert!(offers(&cp, 1, &[("cpu", 2.0)], 1.0).is_empty());
    assert_eq!(offers(&cp, 2, &[("cpu", 8.0)], 1.0), vec![j]);
}

#[test]
fn checkin_outside_availability_is_refused() {
    let cp = plane(PolicyKind::Fifo, 0);
    let mut info = client(1, &[], &[]);
    info.avail_start = 10.0;
    info.avail_end = 20.0;
    assert_eq!(cp.checkin(&info, 5.0), CheckInOutcome::Unavailable);
    assert_eq!(cp.checkin(&info, 25.0), CheckInOutcome::Unavailable);
    assert!(matches!(cp.checkin(&info, 15.0), CheckInOutcome::Offers(_)));
}

#[test]
fn two_clients_race_for_the_last_slot() {
    for _ in 0..200 {
        let cp = plane(PolicyKind::Fifo, 0);
        let j = register(&cp, 2, &[], 0.0);
        cp.job_manager().job_request(j, 2, 0.0).unwrap();
        for c in 0..3 {
            offers(&cp, c, &[], 1.0);
        }
        assert!(cp.accept(ClientId(0), j, 1.0).is_bound());
        let barrier = Barrier::new(2);
        let wins = AtomicUsize::new(0);
        thread::scope(|s| {
            for c in 1..3 {
                let (cp, barrier, wins) = (&cp, &barrier, &wins);
                s.spawn(move || {
                    barrier.wait();
                    match cp.accept(ClientId(c), j, 1.5) {
                        AcceptOutcome::Bound { .. } => {
                            wins.fetch_add(1, Ordering::Relaxed);
                        }
                        AcceptOutcome::Rejected(r) => {
                            assert!(matches!(r, RejectReason::Saturated | RejectReason::NotRequesting), "{r:?}")
                        }
                    }
                });
            }
        });
        assert_eq!(wins.into_inner(), 1);
        assert_eq!(cp.jobs().get(j).unwrap().amount, 2);
    }
}

#[test]
fn accept_rejections() {
    let cp = plane(PolicyKind::Fifo, 0);
    let j = register(&cp, 3, &[], 0.0);
    cp.job_manager().job_request(j, 3, 0.0).unwrap();
    // no offer held
    assert_eq!(cp.accept(ClientId(1), j, 0.0), AcceptOutcome::Rejected(RejectReason::NoOffer));
    // stale offer
    offers(&cp, 1, &[], 0.0);
    assert_eq!(cp.accept(ClientId(1), j, 10.5), AcceptOutcome::Rejected(RejectReason::OfferExpired));
    // the round closed between offer and accept
    offers(&cp, 2, &[], 11.0);
    assert!(cp.job_manager().job_end_request(j, 11.0));
    assert!(!cp.accept(ClientId(2), j, 11.5).is_bound());
    // a bound client holds one task at a time
    let k = register(&cp, 3, &[], 12.0);
    cp.job_manager().job_request(k, 3, 12.0).unwrap();
    offers(&cp, 3, &[], 12.0);
    assert!(cp.accept(ClientId(3), k, 12.0).is_bound());
    assert!(offers(&cp, 3, &[], 13.0).is_empty(), "already served this round");
}

#[test]
fn serve_partition_examples() {
    // group query cpu >= 4, two matching clients and one not, demand 2
    let cp = plane(PolicyKind::FairshareSmallbatch, 0);
    let j = register(&cp, 2, &[("cpu", 4.0)], 0.0);
    cp.job_manager().job_request(j, 2, 0.0).unwrap();
    for (id, cpu) in [(1, 4.0), (2, 1.0), (3, 8.0)] {
        assert!(matches!(cp.checkin(&client(id, &[("cpu", cpu)], &[]), 1.0), CheckInOutcome::Cached { .. }));
    }
    let served = cp.serve_partitions(1.0);
    let ids: BTreeSet<u64> = served.iter().map(|(c, _)| c.0).collect();
    assert_eq!(ids, BTreeSet::from([1, 3]));
    assert!(cp.shards()[0].cache().contains(ClientId(2)));

    // two members with demand 1 each share one group round-robin
    let cp = plane(PolicyKind::FairshareSmallbatch, 0);
    let a = register(&cp, 1, &[], 0.0);
    let b = register(&cp, 1, &[], 0.0);
    cp.job_manager().job_request(a, 1, 0.0).unwrap();
    cp.job_manager().job_request(b, 1, 0.0).unwrap();
    for id in [1, 2] {
        cp.checkin(&client(id, &[], &[]), 1.0);
    }
    let firsts: BTreeSet<JobId> = cp
        .serve_partitions(1.0)
        .iter()
        .map(|(_, r)| r.offers[0].job_id)
        .collect();
    assert_eq!(firsts, BTreeSet::from([a, b]));

    // an empty cache serves nobody
    let cp = plane(PolicyKind::FairshareSmallbatch, 0);
    let j = register(&cp, 1, &[], 0.0);
    cp.job_manager().job_request(j, 1, 0.0).unwrap();
    assert!(cp.serve_partitions(1.0).is_empty());
}

#[test]
fn routing_spreads_ids_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[route(ClientId(rng.random()), 4)] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() <= 0.015, "{counts:?}");
    }
    // sequential ids spread as well
    let mut counts = [0usize; 4];
    for i in 0..n {
        counts[route(ClientId(i), 4)] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() <= 0.015, "{counts:?}");
    }
}

#[test]
fn sharded_windows_partition_the_clients() {
    let cp = ControlPlane::new(
        ControlPlaneConfig {
            shards: 4,
            ..ControlPlaneConfig::default()
        },
        PolicyKind::Rarity.build(0),
        0.0,
    );
    for i in 0..400 {
        cp.checkin(&client(i, &[("cpu", (i % 5) as f64)], &[]), 1.0);
    }
    let per_shard: Vec<usize> = cp.shards().iter().map(|s| s.window().size()).collect();
    assert_eq!(per_shard.iter().sum::<usize>(), 400);
    assert_eq!(cp.scheduler().clients().size(), 400);
    for (i, s) in cp.shards().iter().enumerate() {
        for (_, info) in s.window().snapshot() {
            assert_eq!(route(info.client_id, 4), i);
        }
    }
    let c = constraint(&[("cpu", 3.0)]);
    let hits: usize = cp.shards().iter().map(|s| s.window().count_satisfying(&c)).sum();
    assert_eq!(hits, 160);
    assert!((cp.scheduler().clients().proportion(&c) - 0.4).abs() < 1e-12);
}

#[test]
fn private_attributes_stay_out_of_the_window() {
    let cp = plane(PolicyKind::Fifo, 0);
    cp.checkin(&client(1, &[("cpu", 2.0)], &[("dataset_size", 500.0)]), 0.0);
    let (_, info) = &cp.shards()[0].window().snapshot()[0];
    assert!(info.private_attrs.is_empty());
    assert_eq!(info.public_attrs, attrs(&[("cpu", 2.0)]));
}
