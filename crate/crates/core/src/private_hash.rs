//! Attacks on a secret random hash `h: [0, N) -> [0, P)`.
//!
//! With `X` the joint distribution of consecutive pre-hash accesses and `Y`
//! the same for post-hash accesses, the one-hot assignment matrix `B`
//! (`B[j, i] = 1` iff `h(i) = j`) satisfies `Y = B X B^T`. The attacker
//! estimates `B` by minimizing `|Y - B X B^T|_F^2` over hash functions:
//!
//! * [`greedy_frequency_match`] ignores `X` and `Y` and matches marginals.
//! * [`omp_fit`] builds `B` one column at a time, each step adding the
//!   feasible column that lowers the loss the most, then refines with
//!   coordinate-descent sweeps.
//! * [`brute_force_oracle`] enumerates every assignment of tiny instances.
//!
//! During construction, with `S` the inputs assigned so far, the partial
//! estimate is `Yhat_S[a, b] = sum of X[u, v] over u, v in S, h(u) = a,
//! h(v) = b` and the partial loss is `|Y - Yhat_S|^2`. Adding `i -> j` only
//! touches row `j` and column `j` of `Yhat`, through row and column `i` of
//! `X` restricted to `S + {i}`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq_attack::{build_inversion_table, evaluate_topk, AccuracyCurve};
use crate::hashing::HashSpec;
use crate::sparse::CsrMatrix;
use crate::trace::{CategoricalDistribution, PairDistribution};

pub const UNASSIGNED: u32 = u32::MAX;

/// Largest `P^N` the exhaustive oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 1_000_000;

/// Residuals above this many outputs are kept in a hash map instead of a
/// dense `P x P` array.
const DENSE_RESIDUAL_MAX_P: usize = 2048;

/// Estimated hash as a column assignment; materializes as a one-hot `P x N`
/// matrix in CSR layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    n: usize,
    p: usize,
    assign: Vec<u32>,
}

impl AssignmentMatrix {
    pub fn unassigned(n: usize, p: usize) -> Self {
        AssignmentMatrix { n, p, assign: vec![UNASSIGNED; n] }
    }

    pub fn from_assignments(p: usize, assign: Vec<u32>) -> Result<Self> {
        if let Some(bad) = assign.iter().find(|&&j| j != UNASSIGNED && j as usize >= p) {
            return Err(Error::Domain { value: *bad as u64, size: p as u64, context: " in assignment".into() });
        }
        Ok(AssignmentMatrix { n: assign.len(), p, assign })
    }

    pub fn from_spec(spec: &HashSpec) -> Self {
        AssignmentMatrix { n: spec.n() as usize, p: spec.p() as usize, assign: spec.table() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize) -> Option<u32> {
        let j = self.assign[i];
        (j != UNASSIGNED).then_some(j)
    }

    pub fn set(&mut self, i: usize, j: u32) {
        assert!((j as usize) < self.p, "output {j} >= P={}", self.p);
        self.assign[i] = j;
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assign
    }

    pub fn is_complete(&self) -> bool {
        self.assign.iter().all(|&j| j != UNASSIGNED)
    }

    /// One-hot `P x N` matrix: row `j` lists the inputs mapped to `j`.
    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(
            self.p,
            self.n,
            self.assign
                .iter()
                .enumerate()
                .filter(|(_, &j)| j != UNASSIGNED)
                .map(|(i, &j)| (j, i as u32, 1.0)),
        )
        .expect("assignments are in range")
    }

    pub fn to_hash_spec(&self) -> Result<HashSpec> {
        if !self.is_complete() {
            return Err(Error::invalid("assignment has unassigned inputs"));
        }
        HashSpec::map(self.assign.clone(), self.p as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Every step scores all (unassigned input, output) pairs.
    FullScan,
    /// Inputs are taken in descending order of their `X` mass; each step
    /// only picks the best output for the next input.
    FrequencyOrdered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmpConfig {
    pub selection: Selection,
    pub refinement_sweeps: usize,
    /// Stop refining when a sweep lowers the loss by less than this fraction.
    pub convergence_tol: f64,
}

impl Default for OmpConfig {
    fn default() -> Self {
        OmpConfig { selection: Selection::FrequencyOrdered, refinement_sweeps: 20, convergence_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrajectory {
    /// Loss after each construction step, then after each refinement sweep.
    pub loss_per_iteration: Vec<f64>,
    pub construction_steps: usize,
    /// Accuracy after construction and after each sweep, when an evaluator
    /// was supplied.
    pub accuracy_per_sweep: Vec<f64>,
    pub sweeps_run: usize,
    /// Inputs with no mass in `X`; they are placed last, on the output with
    /// the largest residual marginal.
    pub unobserved_inputs: Vec<u32>,
}

impl FitTrajectory {
    pub fn refinement_losses(&self) -> &[f64] {
        // the last construction loss is where refinement starts
        let start = self.construction_steps.saturating_sub(1);
        &self.loss_per_iteration[start.min(self.loss_per_iteration.len())..]
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_per_iteration.last().copied().unwrap_or(0.0)
    }
}

fn pair_csr(d: &PairDistribution) -> CsrMatrix {
    CsrMatrix::from_triplets(d.n, d.n, d.entries.iter().map(|(&(a, b), &p)| (a, b, p))).expect("entries within n")
}

fn check_normalized(d: &PairDistribution, what: &str) -> Result<()> {
    let s = d.sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// `B X B^T` for a fully assigned `B`, as sparse entries.
pub fn push_pairs(x: &PairDistribution, b: &AssignmentMatrix) -> Result<BTreeMap<(u32, u32), f64>> {
    if x.n != b.n() {
        return Err(Error::SizeMismatch(format!("X is {0}x{0}, B has {1} columns", x.n, b.n())));
    }
    let mut out = BTreeMap::new();
    for (&(u, v), &p) in &x.entries {
        let (a, c) = match (b.get(u as usize), b.get(v as usize)) {
            (Some(a), Some(c)) => (a, c),
            _ => return Err(Error::invalid("assignment has unassigned inputs")),
        };
        *out.entry((a, c)).or_insert(0.0) += p;
    }
    Ok(out)
}

/// Exact pushforward of a pair distribution through a hash.
pub fn pushforward_pairs(x: &PairDistribution, spec: &HashSpec) -> Result<PairDistribution> {
    let b = AssignmentMatrix::from_spec(spec);
    let entries = push_pairs(x, &b)?;
    Ok(PairDistribution { n: spec.p() as usize, entries, counts: BTreeMap::new(), total_count: 0 })
}

/// `|Y - B X B^T|_F^2`.
pub fn loss(x: &PairDistribution, y: &PairDistribution, b: &AssignmentMatrix) -> Result<f64> {
    if y.n != b.p() {
        return Err(Error::SizeMismatch(format!("Y is {0}x{0}, B has {1} rows", y.n, b.p())));
    }
    if !b.is_complete() {
        return Err(Error::invalid("assignment has unassigned inputs"));
    }
    let yhat = push_pairs(x, b)?;
    let mut l = 0.0;
    for (k, &yv) in &y.entries {
        let d = yv - yhat.get(k).copied().unwrap_or(0.0);
        l += d * d;
    }
    for (k, &v) in &yhat {
        if !y.entries.contains_key(k) {
            l += v * v;
        }
    }
    Ok(l)
}

/// Marginal-matching baseline. Inputs in descending prior order each take
/// the output with the most unexplained observed frequency.
pub fn greedy_frequency_match(
    prior: &CategoricalDistribution,
    observed: &CategoricalDistribution,
) -> Result<AssignmentMatrix> {
    let (n, p) = (prior.n, observed.n);
    if p == 0 || p > n {
        return Err(Error::invalid(format!("need 1 <= P <= N, got P={p} N={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| prior.probs[b].partial_cmp(&prior.probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));

    #[derive(PartialEq)]
    struct Slot(f64, Reverse<u32>);
    impl Eq for Slot {}
    impl PartialOrd for Slot {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Slot {
        fn cmp(&self, other: &Self) -> Ordering {
            self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
        }
    }

    let mut heap: BinaryHeap<Slot> =
        observed.probs.iter().enumerate().map(|(j, &f)| Slot(f, Reverse(j as u32))).collect();
    let mut b = AssignmentMatrix::unassigned(n, p);
    for i in order {
        let Slot(resid, Reverse(j)) = heap.pop().expect("P >= 1");
        b.set(i, j);
        heap.push(Slot((resid - prior.probs[i]).max(0.0), Reverse(j)));
    }
    Ok(b)
}

enum Residual {
    Dense { p: usize, r: Vec<f64> },
    Sparse(HashMap<u64, f64>),
}

impl Residual {
    fn new(y: &PairDistribution) -> Self {
        let p = y.n;
        if p <= DENSE_RESIDUAL_MAX_P {
            let mut r = vec![0.0; p * p];
            for (&(a, b), &v) in &y.entries {
                r[a as usize * p + b as usize] = v;
            }
            Residual::Dense { p, r }
        } else {
            Residual::Sparse(y.entries.iter().map(|(&(a, b), &v)| (key(a, b), v)).collect())
        }
    }

    #[inline]
    fn get(&self, a: u32, b: u32) -> f64 {
        match self {
            Residual::Dense { p, r } => r[a as usize * p + b as usize],
            Residual::Sparse(m) => m.get(&key(a, b)).copied().unwrap_or(0.0),
        }
    }

    #[inline]
    fn add(&mut self, a: u32, b: u32, d: f64) {
        match self {
            Residual::Dense { p, r } => r[a as usize * *p + b as usize] += d,
            Residual::Sparse(m) => *m.entry(key(a, b)).or_insert(0.0) += d,
        }
    }

    /// Row sum plus column sum of the residual for every output.
    fn marginals(&self, p: usize) -> Vec<f64> {
        let mut m = vec![0.0; p];
        match self {
            Residual::Dense { r, .. } => {
                for a in 0..p {
                    for b in 0..p {
                        let v = r[a * p + b];
                        m[a] += v;
                        m[b] += v;
                    }
                }
            }
            Residual::Sparse(map) => {
                let mut keys: Vec<u64> = map.keys().copied().collect();
                keys.sort_unstable();
                for k in keys {
                    let v = map[&k];
                    m[(k >> 32) as usize] += v;
                    m[(k & 0xFFFF_FFFF) as usize] += v;
                }
            }
        }
        m
    }
}

#[inline]
fn key(a: u32, b: u32) -> u64 {
    ((a as u64) << 32) | b as u64
}

/// Change of `(R - d)^2` relative to `R^2`.
#[inline]
fn grow(r: f64, d: f64) -> f64 {
    d * d - 2.0 * r * d
}

/// Row and column `i` of `X` aggregated by output, for one input at a time.
#[derive(Clone, Default)]
struct Gathered {
    row_agg: Vec<f64>,
    col_agg: Vec<f64>,
    row_touched: Vec<u32>,
    col_touched: Vec<u32>,
}

impl Gathered {
    fn new(p: usize) -> Self {
        Gathered { row_agg: vec![0.0; p], col_agg: vec![0.0; p], ..Default::default() }
    }
}

struct Fit {
    p: usize,
    rows: CsrMatrix,
    cols: CsrMatrix,
    diag: Vec<f64>,
    b: AssignmentMatrix,
    residual: Residual,
    loss: f64,
    g: Gathered,
}

impl Fit {
    fn new(x: &PairDistribution, y: &PairDistribution) -> Self {
        let rows = pair_csr(x);
        let cols = rows.transpose();
        let diag = (0..x.n).map(|i| rows.get(i, i as u32)).collect();
        let p = y.n;
        Fit {
            p,
            diag,
            b: AssignmentMatrix::unassigned(x.n, p),
            residual: Residual::new(y),
            loss: y.entries.values().map(|v| v * v).sum(),
            g: Gathered::new(p),
            rows,
            cols,
        }
    }

    /// Aggregates row and column `i` of `X` over assigned inputs other than
    /// `i`, keyed by their output.
    fn gather_into(&self, i: usize, g: &mut Gathered) {
        for &b in &g.row_touched {
            g.row_agg[b as usize] = 0.0;
        }
        for &a in &g.col_touched {
            g.col_agg[a as usize] = 0.0;
        }
        g.row_touched.clear();
        g.col_touched.clear();
        for (v, val) in self.rows.row(i) {
            if v as usize == i {
                continue;
            }
            if let Some(b) = self.b.get(v as usize) {
                if g.row_agg[b as usize] == 0.0 {
                    g.row_touched.push(b);
                }
                g.row_agg[b as usize] += val;
            }
        }
        for (u, val) in self.cols.row(i) {
            if u as usize == i {
                continue;
            }
            if let Some(a) = self.b.get(u as usize) {
                if g.col_agg[a as usize] == 0.0 {
                    g.col_touched.push(a);
                }
                g.col_agg[a as usize] += val;
            }
        }
    }

    fn gather(&mut self, i: usize) {
        let mut g = std::mem::take(&mut self.g);
        self.gather_into(i, &mut g);
        self.g = g;
    }

    /// Loss change if the gathered input were placed on output `j`.
    fn delta_with(&self, g: &Gathered, i: usize, j: u32) -> f64 {
        let mut d = 0.0;
        for &b in &g.row_touched {
            if b != j {
                d += grow(self.residual.get(j, b), g.row_agg[b as usize]);
            }
        }
        for &a in &g.col_touched {
            if a != j {
                d += grow(self.residual.get(a, j), g.col_agg[a as usize]);
            }
        }
        let jj = g.row_agg[j as usize] + g.col_agg[j as usize] + self.diag[i];
        d + grow(self.residual.get(j, j), jj)
    }

    fn delta(&self, i: usize, j: u32) -> f64 {
        self.delta_with(&self.g, i, j)
    }

    /// Adds (`sign = -1`) or removes (`sign = +1`) the gathered input's
    /// contribution on output `j` to or from the residual.
    fn shift(&mut self, i: usize, j: u32, sign: f64) {
        let g = &self.g;
        for &b in &g.row_touched {
            self.residual.add(j, b, sign * g.row_agg[b as usize]);
        }
        for &a in &g.col_touched {
            self.residual.add(a, j, sign * g.col_agg[a as usize]);
        }
        self.residual.add(j, j, sign * self.diag[i]);
    }

    /// Lowest output minimizing the loss change for the gathered input.
    fn best_output_with(&self, g: &Gathered, i: usize) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for j in 0..self.p as u32 {
            let d = self.delta_with(g, i, j);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    fn best_output(&self, i: usize) -> (u32, f64) {
        self.best_output_with(&self.g, i)
    }

    fn assign(&mut self, i: usize, j: u32, delta: f64) {
        self.shift(i, j, -1.0);
        self.b.set(i, j);
        self.loss += delta;
    }

    fn mass(&self, i: usize) -> f64 {
        self.rows.row(i).map(|(_, v)| v).sum::<f64>() + self.cols.row(i).map(|(_, v)| v).sum::<f64>()
    }

    /// One coordinate-descent pass. Returns the number of moved inputs.
    fn sweep(&mut self, order: &[usize]) -> usize {
        let mut moves = 0;
        for &i in order {
            let current = self.b.get(i).expect("fully assigned");
            self.gather(i);
            self.shift(i, current, 1.0);
            let stay = self.delta(i, current);
            let without = self.loss - stay;
            let (best, d) = self.best_output(i);
            let margin = 1e-14 * (self.loss.abs() + stay.abs()).max(f64::MIN_POSITIVE);
            let (j, dj) = if best != current && d < stay - margin { (best, d) } else { (current, stay) };
            if j != current {
                moves += 1;
            }
            self.shift(i, j, -1.0);
            self.b.set(i, j);
            self.loss = without + dj;
        }
        moves
    }
}

fn check_problem(x: &PairDistribution, y: &PairDistribution, p: usize) -> Result<()> {
    if p == 0 || p > x.n {
        return Err(Error::invalid(format!("need 1 <= P <= N, got P={p} N={}", x.n)));
    }
    if y.n != p {
        return Err(Error::SizeMismatch(format!("Y is {0}x{0}, expected {p}x{p}", y.n)));
    }
    check_normalized(x, "X")?;
    check_normalized(y, "Y")
}

/// OMP construction plus coordinate-descent refinement.
pub fn omp_fit(
    x: &PairDistribution,
    y: &PairDistribution,
    p: usize,
    config: &OmpConfig,
) -> Result<(AssignmentMatrix, FitTrajectory)> {
    omp_fit_tracked(x, y, p, config, None::<fn(&AssignmentMatrix) -> f64>)
}

/// [`omp_fit`] that also records `accuracy(B)` after construction and after
/// every refinement sweep.
pub fn omp_fit_tracked<F>(
    x: &PairDistribution,
    y: &PairDistribution,
    p: usize,
    config: &OmpConfig,
    mut accuracy: Option<F>,
) -> Result<(AssignmentMatrix, FitTrajectory)>
where
    F: FnMut(&AssignmentMatrix) -> f64,
{
    check_problem(x, y, p)?;
    if !(config.convergence_tol > 0.0) {
        return Err(Error::invalid("convergence_tol must be > 0"));
    }
    let n = x.n;
    let mut fit = Fit::new(x, y);
    let mut traj = FitTrajectory::default();

    let mass: Vec<f64> = (0..n).map(|i| fit.mass(i)).collect();
    let mut observed: Vec<usize> = (0..n).filter(|&i| mass[i] > 0.0).collect();
    traj.unobserved_inputs = (0..n).filter(|&i| mass[i] <= 0.0).map(|i| i as u32).collect();

    match config.selection {
        Selection::FrequencyOrdered => {
            observed.sort_by(|&a, &b| mass[b].partial_cmp(&mass[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            for &i in &observed {
                fit.gather(i);
                let (j, d) = fit.best_output(i);
                fit.assign(i, j, d);
                traj.loss_per_iteration.push(fit.loss);
            }
        }
        Selection::FullScan => {
            let mut remaining = observed.clone();
            while !remaining.is_empty() {
                let shared = &fit;
                // each candidate is scored independently; ties go to the lowest slot
                let (slot, j, d) = remaining
                    .par_iter()
                    .enumerate()
                    .map_init(
                        || Gathered::new(p),
                        |g, (slot, &i)| {
                            shared.gather_into(i, g);
                            let (j, d) = shared.best_output_with(g, i);
                            (slot, j, d)
                        },
                    )
                    .reduce(
                        || (usize::MAX, 0, f64::INFINITY),
                        |a, b| if b.2 < a.2 || (b.2 == a.2 && b.0 < a.0) { b } else { a },
                    );
                let i = remaining[slot];
                fit.gather(i);
                fit.assign(i, j, d);
                remaining.remove(slot);
                traj.loss_per_iteration.push(fit.loss);
            }
        }
    }

    if !traj.unobserved_inputs.is_empty() {
        let marg = fit.residual.marginals(p);
        let target = marg
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (j, &m)| if m > best.1 { (j, m) } else { best })
            .0 as u32;
        for &i in &traj.unobserved_inputs {
            fit.b.set(i as usize, target);
            traj.loss_per_iteration.push(fit.loss);
        }
    }
    traj.construction_steps = traj.loss_per_iteration.len();
    if let Some(acc) = accuracy.as_mut() {
        traj.accuracy_per_sweep.push(acc(&fit.b));
    }

    let mut order = observed;
    order.sort_by(|&a, &b| mass[b].partial_cmp(&mass[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    for _ in 0..config.refinement_sweeps {
        let before = fit.loss;
        let moves = fit.sweep(&order);
        traj.sweeps_run += 1;
        traj.loss_per_iteration.push(fit.loss);
        if let Some(acc) = accuracy.as_mut() {
            traj.accuracy_per_sweep.push(acc(&fit.b));
        }
        let rel = (before - fit.loss) / before.abs().max(f64::MIN_POSITIVE);
        if moves == 0 || rel < config.convergence_tol {
            break;
        }
    }
    Ok((fit.b, traj))
}

/// Coordinate-descent refinement from a given full assignment; returns the
/// refined assignment and the loss after each sweep (starting loss first).
pub fn refine(
    x: &PairDistribution,
    y: &PairDistribution,
    start: &AssignmentMatrix,
    sweeps: usize,
) -> Result<(AssignmentMatrix, Vec<f64>)> {
    check_problem(x, y, start.p())?;
    if !start.is_complete() || start.n() != x.n {
        return Err(Error::invalid("refinement needs a full assignment over X's inputs"));
    }
    let mut fit = Fit::new(x, y);
    for i in 0..x.n {
        let j = start.get(i).expect("complete");
        fit.gather(i);
        let d = fit.delta(i, j);
        fit.assign(i, j, d);
    }
    let order: Vec<usize> = (0..x.n).filter(|&i| fit.mass(i) > 0.0).collect();
    let mut losses = vec![fit.loss];
    for _ in 0..sweeps {
        let moves = fit.sweep(&order);
        losses.push(fit.loss);
        if moves == 0 {
            break;
        }
    }
    Ok((fit.b, losses))
}

/// Global minimizer by enumeration; ties go to the lexicographically
/// smallest assignment.
pub fn brute_force_oracle(x: &PairDistribution, y: &PairDistribution, p: usize) -> Result<(AssignmentMatrix, f64)> {
    check_problem(x, y, p)?;
    let n = x.n;
    let space = (0..n).try_fold(1u64, |acc, _| acc.checked_mul(p as u64).filter(|&s| s <= ORACLE_LIMIT));
    let Some(space) = space else {
        return Err(Error::TooLarge(format!("{p}^{n} assignments exceed {ORACLE_LIMIT}")));
    };
    let mut current = AssignmentMatrix::from_assignments(p, vec![0; n])?;
    let mut best = (current.clone(), loss(x, y, &current)?);
    for _ in 1..space {
        // odometer with the last input fastest: lexicographic order
        for i in (0..n).rev() {
            let next = current.assign[i] + 1;
            if (next as usize) < p {
                current.assign[i] = next;
                break;
            }
            current.assign[i] = 0;
        }
        let l = loss(x, y, &current)?;
        if l < best.1 {
            best = (current.clone(), l);
        }
    }
    Ok(best)
}

/// Top-K inversion accuracy of an estimated assignment against the true
/// secret hash.
pub fn evaluate_private_attack(
    b_hat: &AssignmentMatrix,
    prior: &CategoricalDistribution,
    true_spec: &HashSpec,
    eval_values: &[u32],
    k: usize,
) -> Result<AccuracyCurve> {
    let spec = b_hat.to_hash_spec()?;
    let table = build_inversion_table(prior, &spec, k)?;
    evaluate_topk(&table, eval_values, true_spec, k)
}
