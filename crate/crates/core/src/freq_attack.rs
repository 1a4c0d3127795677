//! Frequency attack on `(x + mask) mod P` hashing.
//!
//! The attacker knows the pre-hash prior and watches post-hash access
//! frequencies. Every candidate mask predicts an output profile that is a
//! circular shift of the mask-0 profile, so the candidate profiles form a
//! circulant (Toeplitz) matrix and all `P` scores are one circular
//! cross-correlation. Because every shift has the same norm, minimizing
//! `|m_i - a|^2` is the same as maximizing `<m_i, a>`.
//!
//! Once the mask is known, each observed output is inverted to its
//! most probable preimages ([`InversionTable`]).

use std::cmp::Ordering;

use rayon::prelude::*;
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::HashSpec;
use crate::trace::CategoricalDistribution;

/// Relative slack under which two mask scores count as tied.
const TIE_RELATIVE: f64 = 1e-10;

/// Output profile under mask 0; the profile for mask `i` is this one shifted
/// circularly by `i`. The `P x P` matrix is never materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftProfileBank {
    base: Vec<f64>,
}

impl ShiftProfileBank {
    pub fn p(&self) -> usize {
        self.base.len()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// `m_i[j] = m_0[(j - i) mod P]`.
    pub fn column(&self, mask: usize) -> Vec<f64> {
        let p = self.p();
        (0..p).map(|j| self.base[(j + p - mask % p) % p]).collect()
    }
}

/// `m_0[j] = sum of prior[x] over x = j (mod P)`.
pub fn build_shift_bank(prior: &CategoricalDistribution, p: usize) -> Result<ShiftProfileBank> {
    if p == 0 || p > prior.n {
        return Err(Error::invalid(format!("need 1 <= P <= N, got P={p} N={}", prior.n)));
    }
    let mut base = vec![0.0; p];
    for (x, &pr) in prior.probs.iter().enumerate() {
        base[x % p] += pr;
    }
    Ok(ShiftProfileBank { base })
}

fn check_observed(bank: &ShiftProfileBank, observed: &[f64]) -> Result<()> {
    if observed.len() != bank.p() {
        return Err(Error::SizeMismatch(format!(
            "profile size {} vs observation size {}",
            bank.p(),
            observed.len()
        )));
    }
    Ok(())
}

/// `score[i] = <m_i, a>` by direct O(P^2) summation.
pub fn mask_scores_naive(bank: &ShiftProfileBank, observed: &[f64]) -> Result<Vec<f64>> {
    check_observed(bank, observed)?;
    let p = bank.p();
    let m = bank.base();
    Ok((0..p)
        .map(|i| {
            let mut s = 0.0;
            for (j, &a) in observed.iter().enumerate() {
                s += m[(j + p - i) % p] * a;
            }
            s
        })
        .collect())
}

/// Same scores through real FFTs zero-padded to a power of two.
///
/// With `r[k] = sum_n m_0[n] a[n + k]` the linear cross-correlation,
/// `score[i] = r[i] + r[i - P]`, and the negative lag `i - P` sits at
/// `L - (P - i)` in the padded circular result.
pub fn mask_scores_fft(bank: &ShiftProfileBank, observed: &[f64]) -> Result<Vec<f64>> {
    check_observed(bank, observed)?;
    let p = bank.p();
    let len = (2 * p - 1).next_power_of_two().max(2);
    let mut planner = RealFftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(len);
    let inverse = planner.plan_fft_inverse(len);

    let mut a_in = forward.make_input_vec();
    a_in[..p].copy_from_slice(observed);
    let mut a_spec = forward.make_output_vec();
    forward
        .process(&mut a_in, &mut a_spec)
        .map_err(|e| Error::invalid(format!("fft: {e}")))?;

    let mut m_in = forward.make_input_vec();
    m_in[..p].copy_from_slice(bank.base());
    let mut m_spec = forward.make_output_vec();
    forward
        .process(&mut m_in, &mut m_spec)
        .map_err(|e| Error::invalid(format!("fft: {e}")))?;

    let mut prod: Vec<Complex<f64>> = a_spec.iter().zip(&m_spec).map(|(a, m)| a * m.conj()).collect();
    prod[0].im = 0.0;
    let last = prod.len() - 1;
    prod[last].im = 0.0;
    let mut corr = inverse.make_output_vec();
    inverse
        .process(&mut prod, &mut corr)
        .map_err(|e| Error::invalid(format!("fft: {e}")))?;
    let scale = 1.0 / len as f64;
    Ok((0..p)
        .map(|i| {
            let wrap = if i == 0 { 0.0 } else { corr[len - (p - i)] };
            (corr[i] + wrap) * scale
        })
        .collect())
}

/// Lowest index whose score is within the tie slack of the maximum, and
/// whether every score is tied.
fn argmax_lowest(scores: &[f64]) -> (usize, bool) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = TIE_RELATIVE * max.abs().max(f64::MIN_POSITIVE);
    let best = scores.iter().position(|&s| s >= max - slack).unwrap_or(0);
    (best, max - min <= slack)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEstimate {
    pub mask: u32,
    /// All masks scored the same (flat profile); `mask` is then 0.
    pub degenerate: bool,
    pub best_score: f64,
    /// Largest entrywise |naive - fft| relative to the largest score.
    pub max_relative_path_gap: f64,
}

/// Mask maximizing `<m_i, a_t>`, computed by both the naive and the FFT
/// paths. Disagreeing argmaxes are reported as an error.
pub fn recover_mask(bank: &ShiftProfileBank, observed: &CategoricalDistribution) -> Result<MaskEstimate> {
    let naive = mask_scores_naive(bank, &observed.probs)?;
    let fft = mask_scores_fft(bank, &observed.probs)?;
    let (naive_best, degenerate) = argmax_lowest(&naive);
    let (fft_best, _) = argmax_lowest(&fft);
    let scale = naive.iter().fold(0.0_f64, |m, s| m.max(s.abs())).max(f64::MIN_POSITIVE);
    let gap = naive
        .iter()
        .zip(&fft)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0_f64, f64::max);
    if degenerate {
        return Ok(MaskEstimate { mask: 0, degenerate, best_score: naive[0], max_relative_path_gap: gap });
    }
    if naive_best != fft_best {
        return Err(Error::PathDisagreement { naive: naive_best as u32, fft: fft_best as u32 });
    }
    Ok(MaskEstimate {
        mask: naive_best as u32,
        degenerate,
        best_score: naive[naive_best],
        max_relative_path_gap: gap,
    })
}

/// Inverse of an estimated hash: for every output, its preimages ranked by
/// prior probability (descending, lower id first on ties), truncated to
/// `k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionTable {
    pub spec_estimate: HashSpec,
    pub k_max: usize,
    pub lists: Vec<Vec<u32>>,
    /// Position of each input in its own output's list, `u32::MAX` when it
    /// fell beyond `k_max`.
    rank_of: Vec<u32>,
}

impl InversionTable {
    pub fn guesses(&self, y: u32) -> &[u32] {
        &self.lists[y as usize]
    }

    /// Rank of `x` among the guesses for `y`, if present.
    pub fn rank(&self, x: u32, y: u32) -> Option<usize> {
        let xi = x as usize;
        if xi >= self.rank_of.len() || self.spec_estimate.apply_unchecked(x) != y {
            return None;
        }
        let r = self.rank_of[xi];
        (r != u32::MAX).then_some(r as usize)
    }
}

pub fn build_inversion_table(
    prior: &CategoricalDistribution,
    spec_estimate: &HashSpec,
    k: usize,
) -> Result<InversionTable> {
    spec_estimate.validate()?;
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    let n = spec_estimate.n() as usize;
    if prior.n > n {
        return Err(Error::SizeMismatch(format!("prior over {} inputs, hash accepts {n}", prior.n)));
    }
    let prob = |x: u32| prior.probs.get(x as usize).copied().unwrap_or(0.0);
    let mut lists = spec_estimate.preimages();
    let mut rank_of = vec![u32::MAX; n];
    for list in lists.iter_mut() {
        list.sort_by(|&a, &b| prob(b).partial_cmp(&prob(a)).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        list.truncate(k);
        for (r, &x) in list.iter().enumerate() {
            rank_of[x as usize] = r as u32;
        }
    }
    Ok(InversionTable { spec_estimate: spec_estimate.clone(), k_max: k, lists, rank_of })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    /// Entry `k - 1` holds top-`k` accuracy.
    pub top_k_accuracy: Vec<f64>,
    pub n_eval: u64,
}

impl AccuracyCurve {
    pub fn top(&self, k: usize) -> f64 {
        self.top_k_accuracy[k - 1]
    }
}

fn check_k(table: &InversionTable, true_spec: &HashSpec, k: usize) -> Result<()> {
    if k == 0 || k > table.k_max {
        return Err(Error::invalid(format!("K={k} outside 1..={}", table.k_max)));
    }
    if true_spec.n() != table.spec_estimate.n() || true_spec.p() != table.spec_estimate.p() {
        return Err(Error::SizeMismatch("true and estimated hash differ in shape".into()));
    }
    Ok(())
}

/// Fraction of evaluation inputs found among the first `K` guesses for
/// their true hash output.
pub fn evaluate_topk(
    table: &InversionTable,
    eval_values: &[u32],
    true_spec: &HashSpec,
    k: usize,
) -> Result<AccuracyCurve> {
    check_k(table, true_spec, k)?;
    if eval_values.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let hits = eval_values
        .par_chunks(1 << 14)
        .map(|chunk| {
            let mut h = vec![0u64; k];
            for &x in chunk {
                let y = true_spec.apply(x)?;
                if let Some(r) = table.rank(x, y).filter(|&r| r < k) {
                    h[r] += 1;
                }
            }
            Ok::<_, Error>(h)
        })
        .try_reduce(
            || vec![0u64; k],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let n = eval_values.len() as u64;
    let mut acc = 0u64;
    let top_k_accuracy = hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n as f64
        })
        .collect();
    Ok(AccuracyCurve { top_k_accuracy, n_eval: n })
}

/// Closed form of [`evaluate_topk`] when evaluation inputs follow
/// `prior_true`: `sum_x prior_true[x] * [x in g_K(h_true(x))]`.
pub fn analytic_topk(
    prior_true: &CategoricalDistribution,
    table: &InversionTable,
    true_spec: &HashSpec,
    k: usize,
) -> Result<AccuracyCurve> {
    check_k(table, true_spec, k)?;
    if prior_true.n > true_spec.n() as usize {
        return Err(Error::SizeMismatch("prior wider than hash domain".into()));
    }
    let mut mass = vec![0.0; k];
    for (x, &p) in prior_true.probs.iter().enumerate() {
        let y = true_spec.apply_unchecked(x as u32);
        if let Some(r) = table.rank(x as u32, y).filter(|&r| r < k) {
            mass[r] += p;
        }
    }
    let mut acc = 0.0;
    let top_k_accuracy = mass
        .into_iter()
        .map(|m| {
            acc += m;
            acc.min(1.0)
        })
        .collect();
    Ok(AccuracyCurve { top_k_accuracy, n_eval: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn bank_shift_law() {
        let bank = build_shift_bank(&dist(&[0.7, 0.2, 0.1]), 3).unwrap();
        assert_eq!(bank.column(0), vec![0.7, 0.2, 0.1]);
        assert_eq!(bank.column(1), vec![0.1, 0.7, 0.2]);
        let uni = build_shift_bank(&dist(&[0.125; 8]), 4).unwrap();
        assert!(uni.base().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(build_shift_bank(&dist(&[0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn recover_mask_hand_example() {
        let bank = build_shift_bank(&dist(&[0.7, 0.2, 0.1]), 3).unwrap();
        let scores = mask_scores_naive(&bank, &[0.1, 0.7, 0.2]).unwrap();
        let expected = [0.23, 0.54, 0.23];
        for (s, e) in scores.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
        let est = recover_mask(&bank, &dist(&[0.1, 0.7, 0.2])).unwrap();
        assert_eq!(est.mask, 1);
        assert!(!est.degenerate);
        assert_eq!(recover_mask(&bank, &dist(&[0.7, 0.2, 0.1])).unwrap().mask, 0);
    }

    #[test]
    fn flat_prior_is_degenerate() {
        let bank = build_shift_bank(&dist(&[0.25; 4]), 4).unwrap();
        let est = recover_mask(&bank, &dist(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.mask, 0);
    }

    #[test]
    fn size_mismatch() {
        let bank = build_shift_bank(&dist(&[0.7, 0.2, 0.1]), 3).unwrap();
        assert!(matches!(recover_mask(&bank, &dist(&[0.5, 0.5])), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn fft_matches_naive_for_odd_and_tiny_sizes() {
        for p in [1usize, 2, 3, 5, 17, 64, 100] {
            let probs: Vec<f64> = (0..p).map(|i| ((i * 37 + 11) % 23) as f64 + 1.0).collect();
            let z: f64 = probs.iter().sum();
            let bank = ShiftProfileBank { base: probs.iter().map(|v| v / z).collect() };
            let obs: Vec<f64> = (0..p).map(|i| ((i * 13 + 5) % 7) as f64 / 7.0).collect();
            let a = mask_scores_naive(&bank, &obs).unwrap();
            let b = mask_scores_fft(&bank, &obs).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "p={p}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn inversion_table_examples() {
        let prior = dist(&[0.5, 0.3, 0.2]);
        let spec = HashSpec::modulo(0, 2, 3).unwrap();
        let t = build_inversion_table(&prior, &spec, 2).unwrap();
        assert_eq!(t.guesses(0), &[0, 2]);
        assert_eq!(t.guesses(1), &[1]);
        let a = analytic_topk(&prior, &t, &spec, 2).unwrap();
        assert!((a.top(1) - 0.8).abs() < 1e-15);
        assert!((a.top(2) - 1.0).abs() < 1e-15);
        let e = evaluate_topk(&t, &[0, 0, 0, 0, 0, 1, 1, 1, 2, 2], &spec, 2).unwrap();
        assert_eq!(e.top_k_accuracy, vec![0.8, 1.0]);
        assert!(evaluate_topk(&t, &[], &spec, 2).is_err());
        assert!(evaluate_topk(&t, &[0], &spec, 3).is_err());
    }

    #[test]
    fn bijective_table_is_exact() {
        let prior = dist(&[0.1, 0.2, 0.3, 0.4]);
        let spec = HashSpec::modulo(3, 4, 4).unwrap();
        let t = build_inversion_table(&prior, &spec, 3).unwrap();
        for y in 0..4 {
            assert_eq!(t.guesses(y).len(), 1);
        }
        let c = analytic_topk(&prior, &t, &spec, 3).unwrap();
        assert!(c.top_k_accuracy.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let e = evaluate_topk(&t, &[0, 1, 2, 3, 3], &spec, 3).unwrap();
        assert!(e.top_k_accuracy.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_estimate_scores_zero() {
        let prior = dist(&[0.25; 4]);
        let truth = HashSpec::modulo(0, 4, 4).unwrap();
        let guess = HashSpec::modulo(1, 4, 4).unwrap();
        let t = build_inversion_table(&prior, &guess, 1).unwrap();
        assert_eq!(analytic_topk(&prior, &t, &truth, 1).unwrap().top(1), 0.0);
    }
}
