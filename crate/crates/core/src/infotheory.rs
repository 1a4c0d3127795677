//! Plug-in (maximum-likelihood) entropy and mutual information, in bits.
//!
//! No bias correction is applied. Sums run in ascending index order so the
//! results are reproducible to the last bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::HashSpec;
use crate::trace::{empirical_distribution, AccessTrace, CategoricalDistribution, PairDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub table_name: String,
    pub original_size: u64,
    pub post_hash_size: u64,
    pub pre_entropy_bits: f64,
    pub post_entropy_bits: f64,
    pub mutual_information_bits: f64,
}

pub fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    // -0.0 for a point mass
    h.max(0.0)
}

pub fn entropy(dist: &CategoricalDistribution) -> f64 {
    entropy_of(&dist.probs)
}

/// `H(Y | X)` for a joint whose entries are keyed `(x, y)`.
pub fn conditional_entropy(joint: &PairDistribution) -> f64 {
    // entries are ordered by x, so each x's row is contiguous
    let mut h = 0.0;
    let mut iter = joint.entries.iter().peekable();
    while let Some((&(x, _), _)) = iter.peek() {
        let row: Vec<f64> = std::iter::from_fn(|| iter.next_if(|((rx, _), _)| *rx == x).map(|(_, p)| *p)).collect();
        let px: f64 = row.iter().sum();
        if px > 0.0 {
            let cond: Vec<f64> = row.iter().map(|p| p / px).collect();
            h += px * entropy_of(&cond);
        }
    }
    h.max(0.0)
}

/// `I(X; Y) = H(Y) - H(Y | X)` from the empirical joint of aligned samples.
pub fn mutual_information(pre: &[u32], post: &[u32]) -> Result<f64> {
    if pre.len() != post.len() {
        return Err(Error::SizeMismatch(format!("{} pre values vs {} post values", pre.len(), post.len())));
    }
    if pre.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&x, &y) in pre.iter().zip(post) {
        *counts.entry((x, y)).or_insert(0) += 1;
    }
    let n = pre.iter().chain(post).copied().max().unwrap_or(0) as usize + 1;
    let joint = PairDistribution::from_counts(n, counts)?;
    let hy = entropy_of(&joint.second_marginal());
    Ok(hy - conditional_entropy(&joint))
}

/// Pre-hash entropy, post-hash entropy and their mutual information for one
/// column under `spec`.
pub fn hash_leakage_report(trace: &AccessTrace, column: &str, spec: &HashSpec) -> Result<LeakageReport> {
    spec.validate()?;
    let c = trace.schema().column_index(column)?;
    let card = trace.schema().cardinality(c);
    if card > spec.n() {
        return Err(Error::SizeMismatch(format!("column cardinality {card} exceeds hash N={}", spec.n())));
    }
    let pre_dist = empirical_distribution(trace, column)?;
    let pre: Vec<u32> = trace.column_values(c).collect();
    let post = pre.iter().map(|&v| spec.apply(v)).collect::<Result<Vec<_>>>()?;
    let post_dist = CategoricalDistribution::from_values(spec.p() as usize, post.iter().copied())?;
    Ok(LeakageReport {
        table_name: column.to_string(),
        original_size: spec.n() as u64,
        post_hash_size: spec.p() as u64,
        pre_entropy_bits: entropy(&pre_dist),
        post_entropy_bits: entropy(&post_dist),
        mutual_information_bits: mutual_information(&pre, &post)?,
    })
}
