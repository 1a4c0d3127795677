//! Hash layers between raw sparse-feature ids and embedding rows.
//!
//! Two families: the production-style `(x + mask) mod P` and a secret
//! arbitrary table. Each feature column gets its own [`HashSpec`].

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{AccessTrace, CategoricalDistribution, Column, IdDictionary};

/// Function from `N` pre-hash ids to `P` post-hash ids.
///
/// JSON form: `{"variant":"modulo","mask":4,"P":10,"N":100}` or
/// `{"variant":"map","table":[...],"P":10}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum HashSpec {
    #[serde(rename = "modulo")]
    ModuloMask {
        mask: u32,
        #[serde(rename = "P")]
        p: u32,
        #[serde(rename = "N")]
        n: u32,
    },
    #[serde(rename = "map")]
    PrivateMap {
        table: Vec<u32>,
        #[serde(rename = "P")]
        p: u32,
    },
}

impl HashSpec {
    pub fn modulo(mask: u32, p: u32, n: u32) -> Result<Self> {
        let h = HashSpec::ModuloMask { mask, p, n };
        h.validate()?;
        Ok(h)
    }

    pub fn map(table: Vec<u32>, p: u32) -> Result<Self> {
        let h = HashSpec::PrivateMap { table, p };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HashSpec::ModuloMask { mask, p, n } => {
                if *p == 0 || p > n {
                    return Err(Error::invalid(format!("modulo hash needs 1 <= P <= N, got P={p} N={n}")));
                }
                if mask >= p {
                    return Err(Error::invalid(format!("mask {mask} must be < P={p}")));
                }
            }
            HashSpec::PrivateMap { table, p } => {
                if *p == 0 || table.is_empty() {
                    return Err(Error::invalid("private map needs P >= 1 and a non-empty table"));
                }
                if let Some(bad) = table.iter().find(|&&j| j >= *p) {
                    return Err(Error::invalid(format!("table entry {bad} >= P={p}")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> u32 {
        match self {
            HashSpec::ModuloMask { n, .. } => *n,
            HashSpec::PrivateMap { table, .. } => table.len() as u32,
        }
    }

    pub fn p(&self) -> u32 {
        match self {
            HashSpec::ModuloMask { p, .. } | HashSpec::PrivateMap { p, .. } => *p,
        }
    }

    pub fn apply(&self, x: u32) -> Result<u32> {
        if x >= self.n() {
            return Err(Error::Domain {
                value: x as u64,
                size: self.n() as u64,
                context: " for hash input".into(),
            });
        }
        Ok(self.apply_unchecked(x))
    }

    /// Caller guarantees `x < N`.
    pub fn apply_unchecked(&self, x: u32) -> u32 {
        match self {
            HashSpec::ModuloMask { mask, p, .. } => modulo_mask_hash(x, *mask, *p),
            HashSpec::PrivateMap { table, .. } => table[x as usize],
        }
    }

    /// The hash as an explicit table over `0..N`.
    pub fn table(&self) -> Vec<u32> {
        (0..self.n()).map(|x| self.apply_unchecked(x)).collect()
    }

    /// Preimage lists, indexed by output, each ascending.
    pub fn preimages(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.p() as usize];
        for x in 0..self.n() {
            out[self.apply_unchecked(x) as usize].push(x);
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("hash spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Output distribution induced by an input distribution. Counts and
    /// probabilities are both summed over preimages.
    pub fn pushforward(&self, dist: &CategoricalDistribution) -> Result<CategoricalDistribution> {
        if dist.n as u64 > self.n() as u64 {
            return Err(Error::SizeMismatch(format!(
                "distribution over {} inputs, hash accepts {}",
                dist.n,
                self.n()
            )));
        }
        let p = self.p() as usize;
        let mut counts = vec![0u64; p];
        let mut probs = vec![0.0; p];
        for x in 0..dist.n {
            let y = self.apply_unchecked(x as u32) as usize;
            counts[y] += dist.counts[x];
            probs[y] += dist.probs[x];
        }
        Ok(CategoricalDistribution { n: p, counts, probs })
    }
}

/// `(x + mask) mod P`.
pub fn modulo_mask_hash(x: u32, mask: u32, p: u32) -> u32 {
    ((x as u64 + mask as u64) % p as u64) as u32
}

/// Secret hash with each of the `N` entries drawn independently and
/// uniformly from `0..P`.
pub fn random_private_hash(n: u32, p: u32, seed: u64) -> Result<HashSpec> {
    if p == 0 || p > n {
        return Err(Error::invalid(format!("need 1 <= P <= N, got P={p} N={n}")));
    }
    let mut rng = rng::seeded(seed);
    let table = (0..n).map(|_| rng.random_range(0..p)).collect();
    HashSpec::map(table, p)
}

/// Secret hash whose preimage sizes differ by at most one: a seeded shuffle
/// of the inputs dealt round-robin onto the outputs.
pub fn random_balanced_hash(n: u32, p: u32, seed: u64) -> Result<HashSpec> {
    if p == 0 || p > n {
        return Err(Error::invalid(format!("need 1 <= P <= N, got P={p} N={n}")));
    }
    let mut rng = rng::seeded(seed);
    let mut order: Vec<u32> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut table = vec![0; n as usize];
    for (k, x) in order.into_iter().enumerate() {
        table[x as usize] = (k as u32) % p;
    }
    HashSpec::map(table, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashedTrace {
    pub trace: AccessTrace,
    pub spec_fingerprint: String,
}

/// Replaces every value of `column` by its hash. The column's cardinality
/// becomes `P` and its dictionary the identity over post-hash ids.
pub fn apply_hash(trace: &AccessTrace, column: &str, spec: &HashSpec) -> Result<HashedTrace> {
    spec.validate()?;
    let c = trace.schema().column_index(column)?;
    if trace.schema().cardinality(c) > spec.n() {
        return Err(Error::SizeMismatch(format!(
            "column `{column}` has cardinality {}, hash accepts N={}",
            trace.schema().cardinality(c),
            spec.n()
        )));
    }
    let values = trace
        .column_values(c)
        .map(|v| spec.apply(v))
        .collect::<Result<Vec<_>>>()?;
    let hashed = trace.with_column(c, Column::new(column, spec.p()), IdDictionary::identity(spec.p()), values)?;
    Ok(HashedTrace { trace: hashed, spec_fingerprint: spec.fingerprint() })
}
