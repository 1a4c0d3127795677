//! Re-identification through recent purchases.
//!
//! A user's last `m` purchases form a *key* that stays fixed between
//! purchases, so every query the user sends in that window carries it. The
//! [`KeyIntervalIndex`] records, for each key, which users held it and when.
//! An observer links two queries to the same user when they carry the same
//! key and arrive within a time threshold.
//!
//! Intervals are half-open `[start, end)`. A user's last key stays open until
//! `CURRENT`, one second past the last timestamp of the trace.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{AccessTrace, Btag};

/// Per-user purchases `(timestamp, item)` in trace order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurchaseHistory {
    pub purchases: Vec<Vec<(i64, u32)>>,
}

pub fn purchase_history(trace: &AccessTrace, item_column: &str) -> Result<PurchaseHistory> {
    let c = trace.schema().column_index(item_column)?;
    let mut purchases = vec![Vec::new(); trace.user_count()];
    for e in trace.events().iter().filter(|e| e.btag == Btag::Buy) {
        purchases[e.user_id as usize].push((e.timestamp, e.values[c]));
    }
    Ok(PurchaseHistory { purchases })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyInterval {
    pub user: u32,
    pub start: i64,
    /// `None` while the key is still the user's current one.
    pub end: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub key: Vec<u32>,
    pub intervals: Vec<KeyInterval>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyIntervalIndex {
    pub m: usize,
    /// Value standing in for an open end.
    pub current: i64,
    /// Keys in lexicographic order; a key's id is its position here.
    pub entries: Vec<KeyEntry>,
    /// Per user, `(key id, start, end)` in time order with `CURRENT`
    /// substituted for open ends.
    #[serde(skip)]
    by_user: Vec<Vec<(u32, i64, i64)>>,
}

impl KeyIntervalIndex {
    pub fn key(&self, id: u32) -> &[u32] {
        &self.entries[id as usize].key
    }

    pub fn key_id(&self, key: &[u32]) -> Option<u32> {
        self.entries.binary_search_by(|e| e.key.as_slice().cmp(key)).ok().map(|i| i as u32)
    }

    pub fn end_of(&self, interval: &KeyInterval) -> i64 {
        interval.end.unwrap_or(self.current)
    }

    pub fn total_occurrences(&self) -> usize {
        self.entries.iter().map(|e| e.intervals.len()).sum()
    }

    pub fn user_intervals(&self, user: u32) -> &[(u32, i64, i64)] {
        self.by_user.get(user as usize).map_or(&[], Vec::as_slice)
    }

    /// Key held by `user` at time `t`, if the user had `m` purchases by then.
    pub fn current_key(&self, user: u32, t: i64) -> Option<u32> {
        let iv = self.user_intervals(user);
        let k = iv.partition_point(|&(_, start, _)| start <= t);
        let &(key, _, end) = iv.get(k.checked_sub(1)?)?;
        (t < end).then_some(key)
    }

    /// Whether any user other than `user` holds key `key` at time `t`.
    pub fn shared_at(&self, key: u32, user: u32, t: i64) -> bool {
        self.entries[key as usize]
            .intervals
            .iter()
            .any(|iv| iv.user != user && iv.start <= t && t < self.end_of(iv))
    }
}

/// Sliding windows of `m` consecutive purchases per user. A key becomes
/// active at its last purchase and ends at the user's next purchase.
pub fn build_key_index(trace: &AccessTrace, item_column: &str, m: usize) -> Result<KeyIntervalIndex> {
    if m == 0 {
        return Err(Error::invalid("key length m must be >= 1"));
    }
    let history = purchase_history(trace, item_column)?;
    let current = trace.time_span().map_or(1, |(_, last)| last + 1);
    let mut map: BTreeMap<Vec<u32>, Vec<KeyInterval>> = BTreeMap::new();
    for (user, ps) in history.purchases.iter().enumerate() {
        if ps.len() < m {
            continue;
        }
        for w in 0..=ps.len() - m {
            let key: Vec<u32> = ps[w..w + m].iter().map(|&(_, item)| item).collect();
            let start = ps[w + m - 1].0;
            let end = ps.get(w + m).map(|&(t, _)| t);
            map.entry(key).or_default().push(KeyInterval { user: user as u32, start, end });
        }
    }
    let entries: Vec<KeyEntry> = map.into_iter().map(|(key, intervals)| KeyEntry { key, intervals }).collect();
    let mut by_user: Vec<Vec<(u32, i64, i64)>> = vec![Vec::new(); history.purchases.len()];
    for (id, e) in entries.iter().enumerate() {
        for iv in &e.intervals {
            by_user[iv.user as usize].push((id as u32, iv.start, iv.end.unwrap_or(current)));
        }
    }
    for iv in by_user.iter_mut() {
        // equal starts only come from same-second purchases; the empty interval goes first
        iv.sort_by_key(|&(_, s, e)| (s, e));
    }
    Ok(KeyIntervalIndex { m, current, entries, by_user })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub m: usize,
    pub samples: usize,
    pub valid: usize,
    pub unique: usize,
    pub rate: f64,
}

/// Fraction of random (user, time) probes whose current key nobody else
/// holds at that moment. Probes where the user has fewer than `m`
/// purchases are skipped.
pub fn uniqueness_probe(
    index: &KeyIntervalIndex,
    trace: &AccessTrace,
    m: usize,
    samples: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    if m != index.m {
        return Err(Error::invalid(format!("index built for m={}, probe asked m={m}", index.m)));
    }
    if samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let (lo, hi) = trace.time_span().ok_or_else(|| Error::Empty("empty trace".into()))?;
    let users = trace.user_count() as u32;
    let mut rng = rng::seeded(seed);
    let (mut valid, mut unique) = (0usize, 0usize);
    for _ in 0..samples {
        let user = rng.random_range(0..users);
        let t = rng.random_range(lo..=hi);
        let Some(key) = index.current_key(user, t) else { continue };
        valid += 1;
        if !index.shared_at(key, user, t) {
            unique += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Empty("no probe hit a user with enough purchases".into()));
    }
    Ok(UniquenessReport { m, samples, valid, unique, rate: unique as f64 / valid as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    pub timestamp: i64,
    /// Key id in the index the query was derived from.
    pub key: u32,
    pub true_user: u32,
}

/// One query per non-purchase event, carrying the user's key at that time.
/// Users still short of `m` purchases emit nothing.
pub fn derive_queries(trace: &AccessTrace, index: &KeyIntervalIndex) -> Vec<Query> {
    trace
        .events()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.btag != Btag::Buy)
        .filter_map(|(q, e)| {
            index.current_key(e.user_id, e.timestamp).map(|key| Query {
                query_id: q as u64,
                timestamp: e.timestamp,
                key,
                true_user: e.user_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageReport {
    pub threshold: i64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// `None` when nothing was predicted (TP + FP = 0).
    pub precision: Option<f64>,
    /// `None` when no same-key pair belongs to one user (TP + FN = 0).
    pub recall: Option<f64>,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl LinkageReport {
    pub fn from_counts(threshold: i64, tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        LinkageReport {
            threshold,
            tp,
            fp,
            fn_,
            precision,
            recall,
            precision_undefined: precision.is_none(),
            recall_undefined: recall.is_none(),
        }
    }
}

fn check_sorted(queries: &[Query]) -> Result<()> {
    if queries.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::invalid("queries must be sorted by timestamp"));
    }
    Ok(())
}

/// Pair decisions over all unordered pairs of queries that share a key:
/// predicted-same iff `|dt| <= threshold`, actually-same iff same user.
pub fn link_queries(queries: &[Query], threshold: i64) -> Result<LinkageReport> {
    check_sorted(queries)?;
    if threshold < 0 {
        return Err(Error::invalid("threshold must be >= 0"));
    }
    let mut groups: BTreeMap<u32, Vec<(i64, u32)>> = BTreeMap::new();
    for q in queries {
        groups.entry(q.key).or_default().push((q.timestamp, q.true_user));
    }
    let (mut predicted, mut tp, mut same_total) = (0u64, 0u64, 0u64);
    for group in groups.values() {
        let mut per_user: HashMap<u32, u64> = HashMap::new();
        for &(_, u) in group {
            *per_user.entry(u).or_insert(0) += 1;
        }
        same_total += per_user.values().map(|&c| c * (c - 1) / 2).sum::<u64>();

        let mut window: HashMap<u32, u64> = HashMap::new();
        let mut left = 0;
        for (right, &(t, u)) in group.iter().enumerate() {
            while t - group[left].0 > threshold {
                *window.get_mut(&group[left].1).expect("in window") -= 1;
                left += 1;
            }
            predicted += (right - left) as u64;
            let same = window.entry(u).or_insert(0);
            tp += *same;
            *same += 1;
        }
    }
    Ok(LinkageReport::from_counts(threshold, tp, predicted - tp, same_total - tp))
}

pub fn threshold_sweep(queries: &[Query], thresholds: &[i64]) -> Result<Vec<LinkageReport>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be ascending"));
    }
    thresholds.iter().map(|&t| link_queries(queries, t)).collect()
}
