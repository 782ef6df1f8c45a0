//! Properties of attribute maps, constraints and queries.

use fedpool_core::domain::{satisfies, AttributeMap, Constraint, Query};
use proptest::prelude::*;

const NAMES: [&str; 5] = ["cpu", "mem", "os", "gpu_mem", "disk"];
const OPS: [&str; 5] = [">=", ">", "=", "<=", "<"];

/// Naive interpreter: linear lookup and a string match on the operator.
fn naive_eval(attrs: &[(usize, f64)], clauses: &[(usize, usize, f64)]) -> bool {
    for &(name, op, bound) in clauses {
        let mut found = None;
        for &(n, v) in attrs {
            if n == name {
                found = Some(v);
            }
        }
        let Some(v) = found else { return false };
        let ok = match OPS[op] {
            ">=" => v >= bound,
            ">" => v > bound,
            "=" => v == bound,
            "<=" => v <= bound,
            "<" => v < bound,
            _ => unreachable!(),
        };
        if !ok {
            return false;
        }
    }
    true
}

// values on a half-integer grid so equality clauses actually hit
fn grid() -> impl Strategy<Value = f64> {
    (-8i32..=8).prop_map(|k| f64::from(k) / 2.0)
}

fn attrs_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    proptest::collection::btree_map(0..NAMES.len(), grid(), 0..=NAMES.len()).prop_map(|m| m.into_iter().collect())
}

fn clauses_strategy() -> impl Strategy<Value = Vec<(usize, usize, f64)>> {
    proptest::collection::vec((0..NAMES.len(), 0..OPS.len(), grid()), 0..5)
}

fn render(clauses: &[(usize, usize, f64)], spaced: &[bool], upper: &[bool]) -> String {
    let mut s = String::new();
    for (i, &(name, op, v)) in clauses.iter().enumerate() {
        if i > 0 {
            s.push_str(if upper[i % upper.len()] { " AND " } else { " and " });
        }
        let pad = if spaced[i % spaced.len()] { " " } else { "" };
        s.push_str(&format!("{}{pad}{}{pad}{v}", NAMES[name], OPS[op]));
    }
    s
}

fn to_map(attrs: &[(usize, f64)]) -> AttributeMap {
    AttributeMap::from_pairs(attrs.iter().map(|&(n, v)| (NAMES[n], v))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn query_eval_matches_naive_interpreter(
        attrs in attrs_strategy(),
        clauses in clauses_strategy(),
        spaced in proptest::collection::vec(any::<bool>(), 1..4),
        upper in proptest::collection::vec(any::<bool>(), 1..4),
    ) {
        let text = render(&clauses, &spaced, &upper);
        let q: Query = text.parse().unwrap();
        prop_assert_eq!(q.clauses().len(), clauses.len());
        prop_assert_eq!(q.matches(&to_map(&attrs)), naive_eval(&attrs, &clauses), "query {:?}", text);
        // display form parses back to the same query
        let again: Query = q.to_string().parse().unwrap();
        prop_assert_eq!(again, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn empty_constraint_is_always_satisfied(attrs in attrs_strategy()) {
        prop_assert!(satisfies(&to_map(&attrs), &Constraint::none()));
    }

    #[test]
    fn adding_a_bound_never_turns_false_into_true(
        attrs in attrs_strategy(),
        bounds in proptest::collection::btree_map(0..NAMES.len(), grid(), 0..4),
        extra in (0..NAMES.len(), grid()),
    ) {
        let m = to_map(&attrs);
        let c = Constraint::from_pairs(bounds.iter().map(|(&n, &b)| (NAMES[n], b))).unwrap();
        let mut tighter = bounds.clone();
        let slot = tighter.entry(extra.0).or_insert(extra.1);
        *slot = slot.max(extra.1);
        let c2 = Constraint::from_pairs(tighter.iter().map(|(&n, &b)| (NAMES[n], b))).unwrap();
        prop_assert!(!satisfies(&m, &c2) || satisfies(&m, &c));
    }

    #[test]
    fn satisfaction_is_monotone_in_attributes(
        attrs in attrs_strategy(),
        bumps in proptest::collection::vec(0.0f64..3.0, NAMES.len()),
        bounds in proptest::collection::btree_map(0..NAMES.len(), grid(), 0..4),
    ) {
        let c = Constraint::from_pairs(bounds.iter().map(|(&n, &b)| (NAMES[n], b))).unwrap();
        let higher: Vec<(usize, f64)> = attrs.iter().map(|&(n, v)| (n, v + bumps[n])).collect();
        prop_assert!(!satisfies(&to_map(&attrs), &c) || satisfies(&to_map(&higher), &c));
    }

    #[test]
    fn constraint_agrees_with_its_query(
        attrs in attrs_strategy(),
        bounds in proptest::collection::btree_map(0..NAMES.len(), grid(), 0..4),
    ) {
        let c = Constraint::from_pairs(bounds.iter().map(|(&n, &b)| (NAMES[n], b))).unwrap();
        let m = to_map(&attrs);
        prop_assert_eq!(c.to_query().matches(&m), satisfies(&m, &c));
    }

    #[test]
    fn attribute_maps_ignore_insertion_order(attrs in attrs_strategy()) {
        let forward = to_map(&attrs);
        let mut rev = attrs.clone();
        rev.reverse();
        prop_assert_eq!(forward, to_map(&rev));
    }
}

#[test]
fn query_examples() {
    let m = AttributeMap::from_pairs([("cpu", 4.0), ("mem", 2048.0)]).unwrap();
    assert!("cpu>=2 AND mem<4096".parse::<Query>().unwrap().matches(&m));
    assert!(!"cpu>=4 AND disk>=1".parse::<Query>().unwrap().matches(&m));
    assert!("  cpu = 4   and mem <= 2048 ".parse::<Query>().unwrap().matches(&m));
    for bad in ["cpu >=", "cpu 4", ">= 4", "cpu >= 4 AND", "cpu >= 4 OR mem < 1", "cpu >= x"] {
        assert!(bad.parse::<Query>().is_err(), "{bad}");
    }
}

#[test]
fn attribute_values_must_be_finite_and_named() {
    assert!(AttributeMap::from_pairs([("cpu", f64::NAN)]).is_err());
    assert!(AttributeMap::from_pairs([("cpu", f64::INFINITY)]).is_err());
    assert!(AttributeMap::from_pairs([("", 1.0)]).is_err());
    assert!(Constraint::from_pairs([("ram", f64::NEG_INFINITY)]).is_err());
}
