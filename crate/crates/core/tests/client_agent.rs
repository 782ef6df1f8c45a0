//! Client agent: local private filtering and what leaves the device.

mod common;

use common::spec;
use fedpool_core::client_agent::{default_choose, leaks_no_private_names, ClientAgent, FirstEligible, SessionOutcome};
use fedpool_core::messages::OfferMsg;
use fedpool_core::{AttributeMap, ClientId, Constraint, ControlPlane, ControlPlaneConfig, JobId, PolicyKind};
use proptest::prelude::*;

const PRIVATE: [&str; 3] = ["dataset_size", "battery", "label_count"];

fn offer(job: u32, bounds: &[(usize, f64)]) -> OfferMsg {
    OfferMsg {
        job_id: JobId(job),
        job_ip: "10.0.0.1".into(),
        port: 9000,
        round: 1,
        private_constraint: Constraint::from_pairs(bounds.iter().map(|&(n, b)| (PRIVATE[n], b))).unwrap(),
    }
}

fn private_map(values: &[(usize, f64)]) -> AttributeMap {
    AttributeMap::from_pairs(values.iter().map(|&(n, v)| (PRIVATE[n], v))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn default_choice_is_the_first_satisfiable_offer(
        specs in proptest::collection::vec(proptest::collection::btree_map(0..3usize, 0..10i32, 0..3), 0..6),
        have in proptest::collection::btree_map(0..3usize, 0..10i32, 0..4),
    ) {
        let offers: Vec<OfferMsg> = specs
            .iter()
            .enumerate()
            .map(|(i, b)| offer(i as u32, &b.iter().map(|(&n, &v)| (n, f64::from(v))).collect::<Vec<_>>()))
            .collect();
        let mine = private_map(&have.iter().map(|(&n, &v)| (n, f64::from(v))).collect::<Vec<_>>());
        // brute force: every bound needs the attribute present and at least as large
        let want = specs.iter().position(|b| b.iter().all(|(n, need)| have.get(n).is_some_and(|v| v >= need)));
        prop_assert_eq!(default_choose(&offers, &mine).map(|o| o.job_id), want.map(|i| JobId(i as u32)));
    }
}

fn plane_with_jobs(private_bounds: &[&[(&str, f64)]]) -> ControlPlane {
    let cp = ControlPlane::new(ControlPlaneConfig::default(), PolicyKind::Fifo.build(0), 0.0);
    for bounds in private_bounds {
        let id = cp
            .job_manager()
            .job_regist(&spec(2, 1, &[("cpu", 1.0)], bounds), "10.0.0.2", 7000, 0.0)
            .job_id
            .unwrap();
        cp.job_manager().job_request(id, 2, 0.0).unwrap();
    }
    cp
}

#[test]
fn nothing_private_leaves_the_device() {
    let cp = plane_with_jobs(&[&[("dataset_size", 100.0)], &[("battery", 0.5)]]);
    let private = AttributeMap::from_pairs([("dataset_size", 500.0), ("battery", 0.9), ("label_count", 3.0)]).unwrap();
    let public = AttributeMap::from_pairs([("cpu", 4.0)]).unwrap();
    let mut agent = ClientAgent::new(ClientId(7), public, private.clone(), FirstEligible);
    assert!(matches!(agent.session(&cp, 1.0), SessionOutcome::Bound { .. }));
    assert_eq!(agent.sent().len(), 2);
    for msg in agent.sent() {
        assert!(leaks_no_private_names(msg, &private), "{msg}");
        let text = msg.to_string();
        assert!(!text.contains("500") && !text.contains("0.9"), "{text}");
    }
    // the window holds only what was sent
    let (_, stored) = &cp.shards()[0].window().snapshot()[0];
    assert!(stored.private_attrs.is_empty());
}

#[test]
fn leak_detector_finds_names_anywhere() {
    let private = AttributeMap::from_pairs([("battery", 1.0)]).unwrap();
    assert!(!leaks_no_private_names(&serde_json::json!({"a": {"battery": 1}}), &private));
    assert!(!leaks_no_private_names(&serde_json::json!(["x", ["battery"]]), &private));
    assert!(leaks_no_private_names(&serde_json::json!({"cpu": 4, "b": "batteryless"}), &private));
}

#[test]
fn no_accept_is_sent_when_every_offer_fails_privately() {
    let cp = plane_with_jobs(&[&[("dataset_size", 1000.0)], &[("battery", 0.8)]]);
    let private = AttributeMap::from_pairs([("dataset_size", 10.0), ("battery", 0.1)]).unwrap();
    let public = AttributeMap::from_pairs([("cpu", 4.0)]).unwrap();
    let mut agent = ClientAgent::new(ClientId(3), public, private, FirstEligible);
    assert_eq!(agent.session(&cp, 1.0), SessionOutcome::NoEligibleOffer);
    assert_eq!(agent.sent().len(), 1, "only the check-in");
    assert!(cp.bindings().is_empty());
    for j in cp.jobs().snapshot() {
        assert_eq!(j.amount, 0);
    }
}

#[test]
fn agent_skips_to_the_first_privately_eligible_offer() {
    let cp = plane_with_jobs(&[&[("dataset_size", 1000.0)], &[("dataset_size", 10.0)]]);
    let private = AttributeMap::from_pairs([("dataset_size", 50.0)]).unwrap();
    let public = AttributeMap::from_pairs([("cpu", 4.0)]).unwrap();
    let mut agent = ClientAgent::new(ClientId(4), public, private, FirstEligible);
    let SessionOutcome::Bound { offer } = agent.session(&cp, 1.0) else {
        panic!("expected a binding");
    };
    assert_eq!(offer.job_id, JobId(2));
    assert_eq!(cp.jobs().get(JobId(2)).unwrap().amount, 1);
    assert_eq!(cp.jobs().get(JobId(1)).unwrap().amount, 0);
}
