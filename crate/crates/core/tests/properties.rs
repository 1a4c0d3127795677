use std::collections::{BTreeMap, BTreeSet};

use embleak_core::freq_attack::{build_inversion_table, evaluate_topk};
use embleak_core::hashing::{random_private_hash, HashSpec};
use embleak_core::private_hash::{loss, AssignmentMatrix};
use embleak_core::trace::{
    load_events, parse_events, split_trace, AccessEvent, AccessTrace, Btag, CategoricalDistribution, Column,
    Dictionaries, IdDictionary, PairDistribution, TraceSchema,
};
use proptest::prelude::*;

fn btag_strategy() -> impl Strategy<Value = Btag> {
    prop_oneof![Just(Btag::Browse), Just(Btag::Cart), Just(Btag::Favor), Just(Btag::Buy)]
}

fn trace_strategy() -> impl Strategy<Value = AccessTrace> {
    (1u32..6, 1u32..9, 1usize..60).prop_flat_map(|(users, card, len)| {
        prop::collection::vec((0i64..50, 0..users, btag_strategy(), 0..card, 0..card), len).prop_map(
            move |rows| {
                let schema =
                    TraceSchema::new(vec![Column::new("a", card), Column::new("b", card)], true).unwrap();
                let events = rows
                    .into_iter()
                    .map(|(t, u, btag, a, b)| AccessEvent { timestamp: t, user_id: u, btag, values: vec![a, b] })
                    .collect();
                let dictionaries = Dictionaries {
                    users: IdDictionary::identity(users),
                    columns: vec![IdDictionary::identity(card), IdDictionary::identity(card)],
                };
                AccessTrace::new(schema, events, dictionaries).unwrap()
            },
        )
    })
}

fn dist_strategy() -> impl Strategy<Value = CategoricalDistribution> {
    prop::collection::vec(0u64..20, 2..40).prop_filter_map("all zero", |counts| {
        (counts.iter().sum::<u64>() > 0).then(|| CategoricalDistribution::from_counts(counts))
    })
}

fn pair_strategy(n: usize) -> impl Strategy<Value = PairDistribution> {
    prop::collection::btree_map((0..n as u32, 0..n as u32), 1u64..10, 1..(n * n).min(30))
        .prop_map(move |counts| PairDistribution::from_counts(n, counts).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_preserves_events(trace in trace_strategy()) {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let back = parse_events(buf.as_slice(), Some(trace.schema()), Some(trace.dictionaries().clone())).unwrap();
        prop_assert_eq!(back.events(), trace.events());
    }

    #[test]
    fn saved_trace_reloads_with_sidecar(trace in trace_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        trace.save(&path).unwrap();
        let back = load_events(&path).unwrap();
        prop_assert_eq!(back.events(), trace.events());
    }

    #[test]
    fn pushforward_sums_preimage_mass(dist in dist_strategy(), p in 1u32..10, seed in any::<u64>()) {
        let n = dist.n as u32;
        let spec = random_private_hash(n, p.min(n), seed).unwrap();
        let pushed = spec.pushforward(&dist).unwrap();
        let mut expected = vec![0.0; spec.p() as usize];
        for x in 0..n {
            expected[spec.apply(x).unwrap() as usize] += dist.probs[x as usize];
        }
        for (a, b) in pushed.probs.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((pushed.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_dense_frobenius(
        x in pair_strategy(6),
        y in pair_strategy(3),
        assign in prop::collection::vec(0u32..3, 6),
    ) {
        let b = AssignmentMatrix::from_assignments(3, assign.clone()).unwrap();
        let mut pushed = vec![vec![0.0; 3]; 3];
        for i in 0..6 {
            for j in 0..6 {
                pushed[assign[i] as usize][assign[j] as usize] += x.get(i as u32, j as u32);
            }
        }
        let mut oracle = 0.0;
        for a in 0..3 {
            for c in 0..3 {
                let d = y.get(a as u32, c as u32) - pushed[a][c];
                oracle += d * d;
            }
        }
        prop_assert!((loss(&x, &y, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn topk_curve_is_monotone(dist in dist_strategy(), p in 1u32..6, mask in 0u32..64, seed in any::<u64>()) {
        let n = dist.n as u32;
        let p = p.min(n);
        let spec = HashSpec::modulo(mask % p, p, n).unwrap();
        let k = ((n + p - 1) / p) as usize;
        let table = build_inversion_table(&dist, &spec, k).unwrap();
        let eval: Vec<u32> = (0..200).map(|i| ((i as u64).wrapping_mul(seed | 1) % n as u64) as u32).collect();
        let curve = evaluate_topk(&table, &eval, &spec, k).unwrap();
        prop_assert!(curve.top_k_accuracy.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.top_k_accuracy.last().unwrap(), 1.0);
    }

    #[test]
    fn split_partitions_events_by_user(trace in trace_strategy(), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, eval) = split_trace(&trace, ratio, seed).unwrap();
        prop_assert_eq!(train.len() + eval.len(), trace.len());
        let tu: BTreeSet<u32> = train.events().iter().map(|e| e.user_id).collect();
        let eu: BTreeSet<u32> = eval.events().iter().map(|e| e.user_id).collect();
        prop_assert!(tu.is_disjoint(&eu));
        let mut per_user: BTreeMap<u32, usize> = BTreeMap::new();
        for e in trace.events() {
            *per_user.entry(e.user_id).or_default() += 1;
        }
        for (u, c) in per_user {
            let side = if tu.contains(&u) { &train } else { &eval };
            prop_assert_eq!(side.events().iter().filter(|e| e.user_id == u).count(), c);
        }
    }
}
