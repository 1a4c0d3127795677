use std::collections::BTreeMap;

use embleak_core::anonymity::{bucketize, k_anonymity_report};
use embleak_core::freq_attack::{build_shift_bank, mask_scores_fft, mask_scores_naive};
use embleak_core::reident::{build_key_index, derive_queries, link_queries, purchase_history, Query};
use embleak_core::synth::{
    gen_behavior, gen_profiles, sample_distribution, zipf_distribution, BehaviorConfig, MarkovSpec, ProfileConfig,
    ZipfSpec,
};
use embleak_core::trace::{pair_distribution, split_side_is_train, CategoricalDistribution};
use rand::Rng;

fn behavior(users: usize, items: usize, events: f64, purchase: f64) -> BehaviorConfig {
    BehaviorConfig {
        users,
        items,
        column: "item".into(),
        events_per_user: events,
        item_s: 1.0,
        markov: None,
        group_affinity: None,
        restart: 0.0,
        purchase_fraction: purchase,
        start: 0,
        horizon: 2_000,
    }
}

#[test]
fn zipf_sample_recount_tracks_probabilities() {
    let dist = zipf_distribution(ZipfSpec { n: 50, s: 1.1 }).unwrap();
    let n = 400_000;
    let sample = sample_distribution(&dist, n, 17).unwrap();
    assert_eq!(sample.counts.iter().sum::<u64>(), n as u64);
    // Normalizer recomputed independently.
    let z: f64 = (1..=50).map(|r| (r as f64).powf(-1.1)).sum();
    for (r, &c) in sample.counts.iter().enumerate() {
        let p = ((r + 1) as f64).powf(-1.1) / z;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((c as f64 / n as f64 - p).abs() < 5.0 * sd + 1e-12, "rank {r}");
    }
}

#[test]
fn markov_pairs_follow_transition_rows() {
    let rows = vec![
        vec![(1, 0.7), (2, 0.3)],
        vec![(0, 0.5), (3, 0.5)],
        vec![(2, 1.0)],
        vec![(0, 0.2), (1, 0.2), (2, 0.6)],
    ];
    let mut cfg = behavior(3_000, 4, 15.0, 0.0);
    cfg.markov = Some(MarkovSpec::Explicit { rows: rows.clone() });
    let trace = gen_behavior(&cfg, None, 5).unwrap();
    let pairs = pair_distribution(&trace, "item").unwrap();
    for (x, row) in rows.iter().enumerate() {
        let total: u64 = pairs.counts.range((x as u32, 0)..(x as u32 + 1, 0)).map(|(_, &c)| c).sum();
        assert!(total > 1_000);
        let mut expected = [0.0; 4];
        for &(y, p) in row {
            expected[y as usize] = p;
        }
        for (y, &p) in expected.iter().enumerate() {
            let c = pairs.counts.get(&(x as u32, y as u32)).copied().unwrap_or(0);
            let sd = (p * (1.0 - p) / total as f64).sqrt();
            assert!((c as f64 / total as f64 - p).abs() <= 5.0 * sd + 1e-12, "T[{x}][{y}]");
        }
    }
}

#[test]
fn split_fraction_within_binomial_bound() {
    let users = 20_000u32;
    for (seed, ratio) in [(1u64, 0.1), (2, 0.5), (3, 0.8)] {
        let train = (0..users).filter(|&u| split_side_is_train(u, ratio, seed)).count() as f64;
        let sd = (users as f64 * ratio * (1.0 - ratio)).sqrt();
        assert!((train - users as f64 * ratio).abs() < 5.0 * sd);
    }
}

#[test]
fn fft_scores_match_naive_scores() {
    let mut rng = embleak_core::rng::seeded(9);
    for (n, p) in [(7, 7), (40, 9), (1000, 128), (513, 257)] {
        let prior = CategoricalDistribution::from_counts((0..n).map(|_| rng.random_range(0..100u64)).collect());
        let bank = build_shift_bank(&prior, p).unwrap();
        let obs: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        let a = mask_scores_naive(&bank, &obs).unwrap();
        let b = mask_scores_fft(&bank, &obs).unwrap();
        // Direct definition: score[i] = sum_j m0[(j - i) mod P] * obs[j]
        for i in 0..p {
            let direct: f64 = (0..p).map(|j| bank.base()[(j + p - i) % p] * obs[j]).sum();
            assert!((a[i] - direct).abs() < 1e-12);
            assert!((b[i] - direct).abs() < 1e-9);
        }
    }
}

#[test]
fn bucketize_matches_nested_loop_group_by() {
    let cfg = ProfileConfig {
        cardinalities: vec![2, 7, 5],
        names: Some(vec!["gender".into(), "age".into(), "city".into()]),
        occupied_buckets: 30,
        bucket_weights: ZipfSpec { n: 30, s: 1.3 },
    };
    let profiles = gen_profiles(&cfg, 2_000, 4).unwrap();
    for features in [vec!["gender"], vec!["age", "city"], vec!["gender", "age", "city"]] {
        let b = bucketize(&profiles, &features).unwrap();
        let idx: Vec<usize> = features.iter().map(|f| profiles.feature_index(f).unwrap()).collect();
        let rows: Vec<(u32, Vec<u32>)> =
            profiles.rows.iter().map(|(&u, r)| (u, idx.iter().map(|&i| r[i]).collect())).collect();
        for (u, combo) in &rows {
            let same = rows.iter().filter(|(_, c)| c == combo).count();
            assert_eq!(b.anonymity[u], same);
        }
        let report = k_anonymity_report(&b, 10).unwrap();
        for k in 1..=10 {
            let oracle = rows
                .iter()
                .filter(|(_, combo)| rows.iter().filter(|(_, c)| c == combo).count() <= k)
                .count();
            assert_eq!(report.below_k_counts[k - 1], oracle as u64);
        }
    }
}

#[test]
fn key_index_matches_recount() {
    let trace = gen_behavior(&behavior(300, 6, 12.0, 0.5), None, 8).unwrap();
    let history = purchase_history(&trace, "item").unwrap();
    for m in 1..=4 {
        let idx = build_key_index(&trace, "item", m).unwrap();
        let expected: usize = history.purchases.iter().map(|p| (p.len() + 1).saturating_sub(m)).sum();
        assert_eq!(idx.total_occurrences(), expected);

        // current key = last m purchases at or before t
        for (u, ps) in history.purchases.iter().enumerate() {
            for t in (0..2_000).step_by(37) {
                let seen: Vec<u32> = ps.iter().filter(|&&(pt, _)| pt <= t).map(|&(_, it)| it).collect();
                let want = (seen.len() >= m).then(|| seen[seen.len() - m..].to_vec());
                let got = idx.current_key(u as u32, t).map(|k| idx.key(k).to_vec());
                assert_eq!(got, want, "user {u} t {t} m {m}");
            }
        }
    }
}

fn brute_force_link(queries: &[Query], threshold: i64) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..queries.len() {
        for j in i + 1..queries.len() {
            let (a, b) = (&queries[i], &queries[j]);
            if a.key != b.key {
                continue;
            }
            let predicted = (a.timestamp - b.timestamp).abs() <= threshold;
            let same = a.true_user == b.true_user;
            match (predicted, same) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

#[test]
fn link_queries_matches_all_pairs() {
    let trace = gen_behavior(&behavior(150, 3, 10.0, 0.4), None, 21).unwrap();
    let idx = build_key_index(&trace, "item", 2).unwrap();
    let queries = derive_queries(&trace, &idx);
    assert!(queries.len() > 100);
    let mut by_key: BTreeMap<u32, usize> = BTreeMap::new();
    for q in &queries {
        *by_key.entry(q.key).or_default() += 1;
    }
    assert!(by_key.values().any(|&c| c > 1));
    for threshold in [0, 5, 50, 500, 5_000] {
        let r = link_queries(&queries, threshold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), brute_force_link(&queries, threshold), "threshold {threshold}");
    }
}

#[test]
fn restart_mixes_markov_step_with_marginal() {
    // a deterministic cycle, so any other successor comes from a restart
    let k = 5u32;
    let rows: Vec<Vec<(u32, f64)>> = (0..k).map(|x| vec![((x + 1) % k, 1.0)]).collect();
    let mut cfg = behavior(4_000, k as usize, 20.0, 0.0);
    cfg.markov = Some(MarkovSpec::Explicit { rows });
    cfg.restart = 0.3;
    let trace = gen_behavior(&cfg, None, 12).unwrap();
    // restarts draw from the global popularity law, not from the chain's stationary marginal
    let zipf = zipf_distribution(ZipfSpec { n: k as usize, s: 1.0 }).unwrap();
    let pairs = pair_distribution(&trace, "item").unwrap();
    for x in 0..k {
        let total: u64 = pairs.counts.range((x, 0)..(x + 1, 0)).map(|(_, &c)| c).sum();
        let next = (x + 1) % k;
        let hit = pairs.counts.get(&(x, next)).copied().unwrap_or(0) as f64 / total as f64;
        let p = 0.7 + 0.3 * zipf.probs[next as usize];
        let sd = (p * (1.0 - p) / total as f64).sqrt();
        assert!((hit - p).abs() < 5.0 * sd, "item {x}: {hit} vs {p}");
    }
}

#[test]
fn full_scan_fit_ignores_thread_count() {
    use embleak_core::hashing::{apply_hash, random_private_hash};
    use embleak_core::private_hash::{omp_fit, OmpConfig, Selection};

    let mut cfg = behavior(400, 80, 30.0, 0.0);
    cfg.markov = Some(MarkovSpec::Random { out_degree: 3 });
    cfg.restart = 0.4;
    let trace = gen_behavior(&cfg, None, 31).unwrap();
    let truth = random_private_hash(80, 50, 32).unwrap();
    let x = pair_distribution(&trace, "item").unwrap();
    let y = pair_distribution(&apply_hash(&trace, "item", &truth).unwrap().trace, "item").unwrap();
    let config = OmpConfig { selection: Selection::FullScan, ..OmpConfig::default() };
    let fits: Vec<_> = [1, 4]
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(|| omp_fit(&x, &y, 50, &config).unwrap())
        })
        .collect();
    assert_eq!(fits[0].0, fits[1].0);
    assert_eq!(fits[0].1.loss_per_iteration, fits[1].1.loss_per_iteration);
}
