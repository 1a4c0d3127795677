//! Identification through static profile features (k-anonymity) and
//! sensitive-attribute inference from item interactions (ambiguity).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AccessTrace, Btag, ProfileTable};

/// Users grouped by identical values of the selected features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketTable {
    pub features: Vec<String>,
    pub buckets: BTreeMap<Vec<u32>, Vec<u32>>,
    /// user id -> size of the user's bucket.
    pub anonymity: BTreeMap<u32, usize>,
}

impl BucketTable {
    pub fn user_count(&self) -> usize {
        self.anonymity.len()
    }
}

pub fn bucketize(profiles: &ProfileTable, features: &[&str]) -> Result<BucketTable> {
    if features.is_empty() {
        return Err(Error::invalid("select at least one feature"));
    }
    let idx = features
        .iter()
        .map(|f| profiles.feature_index(f))
        .collect::<Result<Vec<_>>>()?;
    let mut buckets: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
    for (&user, row) in &profiles.rows {
        let combo = idx.iter().map(|&i| row[i]).collect();
        buckets.entry(combo).or_default().push(user);
    }
    let anonymity = buckets
        .values()
        .flat_map(|users| users.iter().map(move |&u| (u, users.len())))
        .collect();
    Ok(BucketTable { features: features.iter().map(|s| s.to_string()).collect(), buckets, anonymity })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymityReport {
    pub bucket_count: usize,
    pub user_count: usize,
    /// bucket size -> number of buckets of that size.
    pub histogram: BTreeMap<usize, usize>,
    /// Entry `K - 1`: number of users whose bucket has at most `K` users.
    pub below_k_counts: Vec<u64>,
}

pub fn k_anonymity_report(buckets: &BucketTable, k_max: usize) -> Result<AnonymityReport> {
    if buckets.buckets.is_empty() {
        return Err(Error::Empty("no buckets".into()));
    }
    let mut histogram = BTreeMap::new();
    for users in buckets.buckets.values() {
        *histogram.entry(users.len()).or_insert(0) += 1;
    }
    let mut below = 0u64;
    let below_k_counts = (1..=k_max)
        .map(|k| {
            below += (histogram.get(&k).copied().unwrap_or(0) * k) as u64;
            below
        })
        .collect();
    Ok(AnonymityReport {
        bucket_count: buckets.buckets.len(),
        user_count: buckets.user_count(),
        histogram,
        below_k_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityRecord {
    pub item_id: u32,
    /// Share of the item's accesses per group, aligned with
    /// [`ItemAmbiguity::groups`].
    pub shares: Vec<f64>,
    /// `100 * (1 - max share)`.
    pub ambiguity: f64,
    pub access_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAmbiguity {
    pub group_attr: String,
    /// Sorted distinct values of the group attribute.
    pub groups: Vec<u32>,
    /// One record per accessed item, ascending item id.
    pub records: Vec<AmbiguityRecord>,
}

/// `100 - max(shares) * 100`.
pub fn ambiguity_of(shares: &[f64]) -> f64 {
    let max = shares.iter().copied().fold(0.0_f64, f64::max);
    100.0 * (1.0 - max)
}

/// Per-item distribution of interacting users' group values. Trace users are
/// matched to profile rows through their raw id (which must be an integer).
pub fn ambiguity_per_item(
    trace: &AccessTrace,
    profiles: &ProfileTable,
    item_column: &str,
    group_attr: &str,
    btag: Option<Btag>,
) -> Result<ItemAmbiguity> {
    let c = trace.schema().column_index(item_column)?;
    let g = profiles.feature_index(group_attr)?;
    let mut groups: Vec<u32> = profiles.rows.values().map(|r| r[g]).collect();
    groups.sort_unstable();
    groups.dedup();

    // dense trace user -> group index
    let users = trace.user_count();
    let mut group_of: Vec<Option<usize>> = vec![None; users];
    let mut missing = Vec::new();
    let mut seen = vec![false; users];
    for e in trace.events() {
        let u = e.user_id as usize;
        if seen[u] {
            continue;
        }
        seen[u] = true;
        let raw = trace.raw_user(e.user_id);
        match raw.parse::<u32>().ok().and_then(|id| profiles.rows.get(&id)) {
            Some(row) => group_of[u] = Some(groups.binary_search(&row[g]).expect("listed")),
            None => missing.push(raw),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingProfiles(missing));
    }

    let mut tallies: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for e in trace.events() {
        if btag.is_some_and(|b| b != e.btag) {
            continue;
        }
        let gi = group_of[e.user_id as usize].expect("checked above");
        tallies.entry(e.values[c]).or_insert_with(|| vec![0; groups.len()])[gi] += 1;
    }
    let records = tallies
        .into_iter()
        .map(|(item_id, t)| {
            let total: u64 = t.iter().sum();
            let shares: Vec<f64> = t.iter().map(|&c| c as f64 / total as f64).collect();
            AmbiguityRecord { item_id, ambiguity: ambiguity_of(&shares), shares, access_count: total }
        })
        .collect();
    Ok(ItemAmbiguity { group_attr: group_attr.to_string(), groups, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFractions {
    pub fraction_zero: f64,
    pub fraction_le_20: f64,
    pub fraction_le_50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityDistribution {
    /// Bin `b` covers `[edges[b], edges[b + 1])`; the last bin includes 100.
    pub edges: Vec<f64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
    /// Every item counts once.
    pub item_weighted: SummaryFractions,
    /// Items weighted by their access counts.
    pub access_weighted: SummaryFractions,
}

/// Equal-width histogram of item ambiguity over `[0, 100]`.
pub fn ambiguity_distribution(records: &[AmbiguityRecord], bins: usize) -> Result<AmbiguityDistribution> {
    if records.is_empty() {
        return Err(Error::Empty("no ambiguity records".into()));
    }
    if bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    let width = 100.0 / bins as f64;
    let mut counts = vec![0u64; bins];
    for r in records {
        let b = ((r.ambiguity / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = records.len() as f64;
    let pdf: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mut acc = 0u64;
    let cdf = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / n
        })
        .collect();
    let edges = (0..=bins).map(|b| b as f64 * width).collect();

    let fractions = |weight: &dyn Fn(&AmbiguityRecord) -> f64| {
        let total: f64 = records.iter().map(weight).sum();
        let frac = |pred: &dyn Fn(f64) -> bool| {
            records.iter().filter(|r| pred(r.ambiguity)).map(weight).sum::<f64>() / total
        };
        SummaryFractions {
            fraction_zero: frac(&|a| a <= 1e-9),
            fraction_le_20: frac(&|a| a <= 20.0 + 1e-9),
            fraction_le_50: frac(&|a| a <= 50.0 + 1e-9),
        }
    };
    Ok(AmbiguityDistribution {
        edges,
        pdf,
        cdf,
        item_weighted: fractions(&|_| 1.0),
        access_weighted: fractions(&|r| r.access_count as f64),
    })
}

/// Group value that formed most of the item's accesses (lowest on ties).
pub fn predict_group(item_id: u32, analysis: &ItemAmbiguity) -> Result<u32> {
    let rec = analysis
        .records
        .binary_search_by_key(&item_id, |r| r.item_id)
        .map(|k| &analysis.records[k])
        .map_err(|_| Error::invalid(format!("item {item_id} has no recorded accesses")))?;
    let mut best = 0;
    for (gi, &s) in rec.shares.iter().enumerate() {
        if s > rec.shares[best] {
            best = gi;
        }
    }
    Ok(analysis.groups[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Column;

    fn profiles(rows: &[(u32, Vec<u32>)]) -> ProfileTable {
        ProfileTable {
            features: vec![Column::new("gender", 2), Column::new("age", 100)],
            rows: rows.iter().cloned().collect(),
            duplicate_rows: 0,
        }
    }

    #[test]
    fn three_user_example() {
        let p = profiles(&[(1, vec![0, 18]), (2, vec![0, 18]), (3, vec![1, 25])]);
        let b = bucketize(&p, &["gender", "age"]).unwrap();
        assert_eq!(b.buckets.len(), 2);
        assert_eq!(b.buckets[&vec![0, 18]], vec![1, 2]);
        assert_eq!(b.anonymity.values().copied().collect::<Vec<_>>(), vec![2, 2, 1]);
        let r = k_anonymity_report(&b, 10).unwrap();
        assert_eq!(r.below_k_counts[..3], [1, 3, 3]);
        assert_eq!(r.below_k_counts.len(), 10);
        assert!(bucketize(&p, &["zip"]).is_err());
        assert!(bucketize(&p, &[]).is_err());
    }

    #[test]
    fn identical_users_form_one_bucket() {
        let p = profiles(&(0..7).map(|u| (u, vec![1, 30])).collect::<Vec<_>>());
        let b = bucketize(&p, &["gender"]).unwrap();
        assert_eq!(b.buckets.len(), 1);
        assert_eq!(k_anonymity_report(&b, 10).unwrap().below_k_counts[6], 7);
    }

    #[test]
    fn all_singletons() {
        let p = profiles(&(0..5).map(|u| (u, vec![0, u])).collect::<Vec<_>>());
        let b = bucketize(&p, &["age"]).unwrap();
        assert_eq!(k_anonymity_report(&b, 10).unwrap().below_k_counts[0], 5);
    }

    #[test]
    fn ambiguity_values() {
        assert!((ambiguity_of(&[0.0, 0.0, 0.2, 0.5, 0.3, 0.0, 0.0]) - 50.0).abs() < 1e-9);
        assert_eq!(ambiguity_of(&[0.0, 1.0, 0.0]), 0.0);
        for g in 2..6 {
            let u = vec![1.0 / g as f64; g];
            assert!((ambiguity_of(&u) - 100.0 * (1.0 - 1.0 / g as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_group_picks_majority_then_lowest() {
        let a = ItemAmbiguity {
            group_attr: "age".into(),
            groups: vec![10, 20, 30, 40, 50, 60, 70],
            records: vec![
                AmbiguityRecord { item_id: 3, shares: vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], ambiguity: 0.0, access_count: 1 },
                AmbiguityRecord {
                    item_id: 5,
                    shares: vec![0.0, 0.0, 0.2, 0.5, 0.3, 0.0, 0.0],
                    ambiguity: 50.0,
                    access_count: 10,
                },
                AmbiguityRecord { item_id: 8, shares: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0], ambiguity: 50.0, access_count: 2 },
            ],
        };
        assert_eq!(predict_group(3, &a).unwrap(), 20);
        assert_eq!(predict_group(5, &a).unwrap(), 40);
        assert_eq!(predict_group(8, &a).unwrap(), 10);
        assert!(predict_group(4, &a).is_err());
    }

    #[test]
    fn distribution_of_unambiguous_items() {
        let recs: Vec<AmbiguityRecord> = (0..4)
            .map(|i| AmbiguityRecord { item_id: i, shares: vec![1.0, 0.0], ambiguity: 0.0, access_count: 3 })
            .collect();
        let d = ambiguity_distribution(&recs, 20).unwrap();
        assert_eq!(d.pdf[0], 1.0);
        assert_eq!(d.item_weighted.fraction_zero, 1.0);
        assert_eq!(*d.cdf.last().unwrap(), 1.0);
        assert_eq!(d.edges.len(), 21);
        assert!(ambiguity_distribution(&[], 10).is_err());
    }
}
