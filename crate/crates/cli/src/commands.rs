use std::fs;
use std::path::{Path, PathBuf};

use embleak_core::anonymity::{ambiguity_distribution, ambiguity_per_item, bucketize, k_anonymity_report};
use embleak_core::freq_attack::{build_inversion_table, build_shift_bank, evaluate_topk, recover_mask};
use embleak_core::hashing::{apply_hash, random_balanced_hash, random_private_hash, HashSpec};
use embleak_core::infotheory::hash_leakage_report;
use embleak_core::private_hash::{
    brute_force_oracle, evaluate_private_attack, greedy_frequency_match, loss, omp_fit, omp_fit_tracked,
    AssignmentMatrix, OmpConfig, UNASSIGNED,
};
use embleak_core::reident::{build_key_index, derive_queries, threshold_sweep, uniqueness_probe};
use embleak_core::rng;
use embleak_core::synth::{generate, GenConfig};
use embleak_core::trace::{
    empirical_distribution, ingest_profiles, load_event_pair, load_events, pair_distribution_filtered, split_trace,
    AccessTrace, Btag, CategoricalDistribution, PairDistribution,
};
use rand::Rng as _;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::args::*;
use crate::error::{CliError, Result};
use crate::report::{Outcome, RunManifest, Series};

const SPLIT_STREAM: u64 = 0x73706c6974;
const HASH_STREAM: u64 = 0x68617368;
const PROBE_STREAM: u64 = 0x70726f6265;

fn derive(seed: u64, stream: u64) -> u64 {
    rng::mix64(seed ^ rng::mix64(stream))
}

pub fn dispatch(command: &Command, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    match command {
        Command::Gen(a) => gen(a, seed, m),
        Command::Stats(a) => stats(a, seed, m),
        Command::HashApply(a) => hash_apply(a, seed, m),
        Command::AttackFreq(a) => attack_freq(a, seed, m),
        Command::AttackOmp(a) => attack_omp(a, seed, m),
        Command::AttackGreedy(a) => attack_greedy(a, seed, m),
        Command::Anonymity(a) => anonymity(a, m),
        Command::Ambiguity(a) => ambiguity(a, m),
        Command::ReidentUniqueness(a) => reident_uniqueness(a, seed, m),
        Command::ReidentLink(a) => reident_link(a, m),
        Command::Oracle(a) => oracle(a, seed, m),
    }
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_trace(path: &Path, m: &mut RunManifest) -> Result<AccessTrace> {
    m.record_input(path)?;
    let trace = load_events(path)?;
    log::info!("{}: {} events", path.display(), trace.len());
    Ok(trace)
}

/// Prior and observed traces in one id space.
fn load_input(input: &PairInput, seed: u64, m: &mut RunManifest) -> Result<(AccessTrace, AccessTrace)> {
    match (&input.prior, &input.observed, &input.trace) {
        (Some(prior), Some(observed), None) => {
            m.record_input(prior)?;
            m.record_input(observed)?;
            Ok(load_event_pair(prior, observed)?)
        }
        (None, None, Some(trace)) => {
            let t = load_trace(trace, m)?;
            let split_seed = derive(seed, SPLIT_STREAM);
            m.record_seed("split", split_seed);
            let (prior, observed) = split_trace(&t, input.split_ratio, split_seed)?;
            if prior.is_empty() || observed.is_empty() {
                return Err(embleak_core::Error::Empty("split left one side without events".into()).into());
            }
            Ok((prior, observed))
        }
        _ => Err(CliError::usage("give either --prior and --observed, or --trace")),
    }
}

fn resolve_hash(args: &HashArgs, n: u32, default: Variant, seed: u64, m: &mut RunManifest) -> Result<HashSpec> {
    if let Some(path) = &args.hash {
        m.record_input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let spec: HashSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        return Ok(spec);
    }
    let p = match (args.p, args.p_ratio) {
        (Some(p), _) => p,
        (None, Some(r)) if r > 0.0 && r <= 1.0 => ((r * n as f64).round() as u32).max(1),
        (None, Some(r)) => return Err(CliError::usage(format!("--P-ratio {r} not in (0, 1]"))),
        (None, None) => return Err(CliError::usage("give --hash, --P or --P-ratio")),
    };
    let hash_seed = derive(seed, HASH_STREAM);
    let spec = match args.variant.unwrap_or(default) {
        Variant::Modulo => {
            let mask = match args.mask {
                Some(mask) => mask,
                None => {
                    m.record_seed("hash", hash_seed);
                    rng::seeded(hash_seed).random_range(0..p.max(1))
                }
            };
            HashSpec::modulo(mask, p, n)?
        }
        Variant::Map => {
            m.record_seed("hash", hash_seed);
            random_private_hash(n, p, hash_seed)?
        }
        Variant::Balanced => {
            m.record_seed("hash", hash_seed);
            random_balanced_hash(n, p, hash_seed)?
        }
    };
    Ok(spec)
}

fn cardinality(trace: &AccessTrace, column: &str) -> Result<u32> {
    let c = trace.schema().column_index(column)?;
    Ok(trace.schema().cardinality(c))
}

fn column_values(trace: &AccessTrace, column: &str) -> Result<Vec<u32>> {
    let c = trace.schema().column_index(column)?;
    Ok(trace.column_values(c).collect())
}

fn same_shape(spec: &HashSpec, n: u32) -> Result<()> {
    if spec.n() != n {
        return Err(embleak_core::Error::SizeMismatch(format!(
            "hash has N={} but the column has {n} distinct values",
            spec.n()
        ))
        .into());
    }
    Ok(())
}

fn mask_of(spec: &HashSpec) -> Option<u32> {
    match spec {
        HashSpec::ModuloMask { mask, .. } => Some(*mask),
        HashSpec::PrivateMap { .. } => None,
    }
}

fn spec_summary(spec: &HashSpec) -> serde_json::Value {
    json!({
        "variant": match spec { HashSpec::ModuloMask { .. } => "modulo", HashSpec::PrivateMap { .. } => "map" },
        "N": spec.n(),
        "P": spec.p(),
        "mask": mask_of(spec),
        "fingerprint": spec.fingerprint(),
    })
}

fn sparse_assignment(b: &AssignmentMatrix) -> Vec<[u32; 2]> {
    b.assignments()
        .iter()
        .enumerate()
        .filter(|&(_, &j)| j != UNASSIGNED)
        .map(|(i, &j)| [i as u32, j])
        .collect()
}

fn curve_series(curve: &[f64]) -> Series {
    let mut s = Series::new(&["k", "accuracy"]);
    for (k, &a) in curve.iter().enumerate() {
        s.push([Some((k + 1) as f64), Some(a)]);
    }
    s
}

fn gen(a: &GenArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    m.record_input(&a.config)?;
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let config: GenConfig = serde_json::from_str(&text)?;
    if config.behavior.is_some() && a.out.is_none() {
        return Err(CliError::usage("config has `behavior`; give --out for the trace"));
    }
    let generated = generate(&config, seed)?;
    let mut outputs = Vec::new();
    let mut events = None;
    if let (Some(trace), Some(out)) = (&generated.trace, &a.out) {
        trace.save(out)?;
        events = Some(trace.len());
        outputs.push(json!({ "path": out.display().to_string(), "sha256": digest_file(out)? }));
    }
    let mut profile_rows = None;
    if let Some(profiles) = &generated.profiles {
        let path = match (&a.profiles_out, &a.out) {
            (Some(p), _) => p.clone(),
            (None, Some(out)) => sibling(out, "profiles.csv"),
            (None, None) => return Err(CliError::usage("give --profiles-out or --out")),
        };
        profiles.save(&path)?;
        profile_rows = Some(profiles.len());
        outputs.push(json!({ "path": path.display().to_string(), "sha256": digest_file(&path)? }));
    }
    Outcome::new(json!({
        "users": config.users,
        "events": events,
        "profile_rows": profile_rows,
        "outputs": outputs,
    }))
}

/// `dir/trace.csv` -> `dir/trace.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn stats(a: &StatsArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let trace = load_trace(&a.trace, m)?;
    let n = cardinality(&trace, &a.column)?;
    let spec = resolve_hash(&a.hash, n, Variant::Modulo, seed, m)?;
    let report = hash_leakage_report(&trace, &a.column, &spec)?;
    let mut v = serde_json::to_value(&report)?;
    v["hash"] = spec_summary(&spec);
    v["events"] = json!(trace.len());
    Outcome::new(v)
}

fn hash_apply(a: &HashApplyArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let trace = load_trace(&a.trace, m)?;
    let n = cardinality(&trace, &a.column)?;
    let spec = resolve_hash(&a.hash, n, Variant::Modulo, seed, m)?;
    let hashed = apply_hash(&trace, &a.column, &spec)?;
    hashed.trace.save(&a.out)?;
    let mut outputs = vec![json!({ "path": a.out.display().to_string(), "sha256": digest_file(&a.out)? })];
    if let Some(path) = &a.spec_out {
        let mut s = serde_json::to_string(&spec)?;
        s.push('\n');
        fs::write(path, s).map_err(|e| CliError::io(path, e))?;
        outputs.push(json!({ "path": path.display().to_string(), "sha256": digest_file(path)? }));
    }
    Outcome::new(json!({
        "column": a.column,
        "events": hashed.trace.len(),
        "hash": spec_summary(&spec),
        "outputs": outputs,
    }))
}

struct AttackSetup {
    n: u32,
    prior: CategoricalDistribution,
    eval: Vec<u32>,
    true_spec: HashSpec,
    observed: AccessTrace,
}

fn attack_setup(
    input: &PairInput,
    column: &str,
    hash: &HashArgs,
    default: Variant,
    seed: u64,
    m: &mut RunManifest,
) -> Result<(AccessTrace, AttackSetup)> {
    let (prior_trace, observed) = load_input(input, seed, m)?;
    let n = cardinality(&prior_trace, column)?;
    let true_spec = resolve_hash(hash, n, default, seed, m)?;
    same_shape(&true_spec, n)?;
    let prior = empirical_distribution(&prior_trace, column)?;
    let eval = column_values(&observed, column)?;
    Ok((prior_trace, AttackSetup { n, prior, eval, true_spec, observed }))
}

/// What the attacker sees: consecutive pairs of hashed observed values.
fn pair_problem(
    prior_trace: &AccessTrace,
    setup: &AttackSetup,
    column: &str,
    btag: Option<BtagArg>,
) -> Result<(PairDistribution, PairDistribution)> {
    let btag = btag.map(Btag::from);
    let x = pair_distribution_filtered(prior_trace, column, btag)?;
    let hashed = apply_hash(&setup.observed, column, &setup.true_spec)?;
    let y = pair_distribution_filtered(&hashed.trace, column, btag)?;
    Ok((x, y))
}

fn attack_freq(a: &AttackFreqArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let (_, s) = attack_setup(&a.input, &a.column, &a.hash, Variant::Modulo, seed, m)?;
    let p = s.true_spec.p();
    let observed = CategoricalDistribution::from_values(p as usize, s.eval.iter().map(|&x| s.true_spec.apply_unchecked(x)))?;
    let bank = build_shift_bank(&s.prior, p as usize)?;
    let estimate = recover_mask(&bank, &observed)?;
    let guess = HashSpec::modulo(estimate.mask, p, s.n)?;
    let table = build_inversion_table(&s.prior, &guess, a.k)?;
    let curve = evaluate_topk(&table, &s.eval, &s.true_spec, a.k)?;
    let true_mask = mask_of(&s.true_spec);
    let series = curve_series(&curve.top_k_accuracy);
    Ok(Outcome::new(json!({
        "column": a.column,
        "N": s.n,
        "P": p,
        "true_mask": true_mask,
        "recovered_mask": estimate.mask,
        "mask_correct": true_mask.map(|t| t == estimate.mask),
        "degenerate": estimate.degenerate,
        "best_score": estimate.best_score,
        "max_relative_path_gap": estimate.max_relative_path_gap,
        "K": a.k,
        "top_k_accuracy": curve.top_k_accuracy,
        "n_eval": curve.n_eval,
    }))?
    .with_series(series))
}

fn attack_omp(a: &AttackOmpArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let (prior_trace, s) = attack_setup(&a.input, &a.column, &a.hash, Variant::Map, seed, m)?;
    let (x, y) = pair_problem(&prior_trace, &s, &a.column, a.btag)?;
    let p = s.true_spec.p() as usize;
    let config = OmpConfig { selection: a.selection.into(), refinement_sweeps: a.sweeps, convergence_tol: a.tol };
    let top1 = |b: &AssignmentMatrix| {
        evaluate_private_attack(b, &s.prior, &s.true_spec, &s.eval, 1).map_or(f64::NAN, |c| c.top(1))
    };
    log::info!("OMP over {} inputs into {p} outputs, {} observed pairs", s.n, y.entries.len());
    let (b, trajectory) = omp_fit_tracked(&x, &y, p, &config, Some(top1))?;
    log::info!("OMP done after {} sweeps, loss {:.3e}", trajectory.sweeps_run, trajectory.final_loss());
    let k = a.k.min(s.n as usize);
    let curve = evaluate_private_attack(&b, &s.prior, &s.true_spec, &s.eval, k)?;
    let mut series = Series::new(&["iteration", "loss"]);
    for (i, &l) in trajectory.loss_per_iteration.iter().enumerate() {
        series.push([Some(i as f64), Some(l)]);
    }
    Ok(Outcome::new(json!({
        "column": a.column,
        "N": s.n,
        "P": p,
        "hash": spec_summary(&s.true_spec),
        "config": config,
        "assignment": sparse_assignment(&b),
        "final_loss": trajectory.final_loss(),
        "trajectory": trajectory,
        "top_k_accuracy": curve.top_k_accuracy,
        "n_eval": curve.n_eval,
    }))?
    .with_series(series))
}

fn attack_greedy(a: &AttackGreedyArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let (prior_trace, s) = attack_setup(&a.input, &a.column, &a.hash, Variant::Map, seed, m)?;
    let p = s.true_spec.p() as usize;
    let observed = CategoricalDistribution::from_values(p, s.eval.iter().map(|&x| s.true_spec.apply_unchecked(x)))?;
    let b = greedy_frequency_match(&s.prior, &observed)?;
    let pair_loss = match pair_problem(&prior_trace, &s, &a.column, None) {
        Ok((x, y)) => Some(loss(&x, &y, &b)?),
        Err(_) => None,
    };
    let k = a.k.min(s.n as usize);
    let curve = evaluate_private_attack(&b, &s.prior, &s.true_spec, &s.eval, k)?;
    let series = curve_series(&curve.top_k_accuracy);
    Ok(Outcome::new(json!({
        "column": a.column,
        "N": s.n,
        "P": p,
        "hash": spec_summary(&s.true_spec),
        "assignment": sparse_assignment(&b),
        "pair_loss": pair_loss,
        "top_k_accuracy": curve.top_k_accuracy,
        "n_eval": curve.n_eval,
    }))?
    .with_series(series))
}

fn oracle(a: &OracleArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let (prior_trace, s) = attack_setup(&a.input, &a.column, &a.hash, Variant::Map, seed, m)?;
    let (x, y) = pair_problem(&prior_trace, &s, &a.column, a.btag)?;
    let p = s.true_spec.p() as usize;
    let (best, best_loss) = brute_force_oracle(&x, &y, p)?;
    let config = OmpConfig { refinement_sweeps: a.sweeps, ..OmpConfig::default() };
    let (fit, trajectory) = omp_fit(&x, &y, p, &config)?;
    let omp_loss = trajectory.final_loss();
    Ok(Outcome::new(json!({
        "column": a.column,
        "N": s.n,
        "P": p,
        "hash": spec_summary(&s.true_spec),
        "oracle": { "assignment": sparse_assignment(&best), "loss": best_loss },
        "omp": { "assignment": sparse_assignment(&fit), "loss": omp_loss },
        "omp_excess_loss": omp_loss - best_loss,
    }))?)
}

fn anonymity(a: &AnonymityArgs, m: &mut RunManifest) -> Result<Outcome> {
    m.record_input(&a.profiles)?;
    let profiles = ingest_profiles(&a.profiles)?;
    let features: Vec<&str> = a.features.iter().map(String::as_str).collect();
    let buckets = bucketize(&profiles, &features)?;
    let report = k_anonymity_report(&buckets, a.k_max)?;
    let mut v = serde_json::to_value(&report)?;
    v["features"] = json!(a.features);
    v["duplicate_rows"] = json!(profiles.duplicate_rows);
    Outcome::new(v)
}

fn ambiguity(a: &AmbiguityArgs, m: &mut RunManifest) -> Result<Outcome> {
    let trace = load_trace(&a.trace, m)?;
    m.record_input(&a.profiles)?;
    let profiles = ingest_profiles(&a.profiles)?;
    let analysis = ambiguity_per_item(&trace, &profiles, &a.item, &a.group, a.btag.map(Btag::from))?;
    let dist = ambiguity_distribution(&analysis.records, a.bins)?;
    let mut series = Series::new(&["bin_lo", "bin_hi", "pdf", "cdf"]);
    for b in 0..a.bins {
        series.push([Some(dist.edges[b]), Some(dist.edges[b + 1]), Some(dist.pdf[b]), Some(dist.cdf[b])]);
    }
    let mut v = json!({
        "item": a.item,
        "group_attr": analysis.group_attr,
        "groups": analysis.groups,
        "items": analysis.records.len(),
        "distribution": dist,
    });
    if a.per_item {
        v["records"] = serde_json::to_value(&analysis.records)?;
    }
    Ok(Outcome::new(v)?.with_series(series))
}

fn item_column(trace: &AccessTrace, item: &Option<String>) -> Result<String> {
    match item {
        Some(i) => Ok(i.clone()),
        None => trace
            .schema()
            .columns
            .first()
            .map(|c| c.name.clone())
            .ok_or_else(|| CliError::usage("trace has no feature column; give --item")),
    }
}

fn reident_uniqueness(a: &UniquenessArgs, seed: u64, m: &mut RunManifest) -> Result<Outcome> {
    let trace = load_trace(&a.trace, m)?;
    let item = item_column(&trace, &a.item)?;
    let probe_seed = derive(seed, PROBE_STREAM);
    m.record_seed("probe", probe_seed);
    let mut reports = Vec::new();
    for &k in &a.m {
        let index = build_key_index(&trace, &item, k)?;
        reports.push(uniqueness_probe(&index, &trace, k, a.samples, probe_seed)?);
    }
    Outcome::new(json!({ "item": item, "reports": reports }))
}

fn reident_link(a: &LinkArgs, m: &mut RunManifest) -> Result<Outcome> {
    let trace = load_trace(&a.trace, m)?;
    let item = item_column(&trace, &a.item)?;
    let index = build_key_index(&trace, &item, a.m)?;
    let queries = derive_queries(&trace, &index);
    let sweep = threshold_sweep(&queries, &a.thresholds)?;
    let mut series = Series::new(&["threshold", "precision", "recall"]);
    for r in &sweep {
        series.push([Some(r.threshold as f64), r.precision, r.recall]);
    }
    Ok(Outcome::new(json!({
        "item": item,
        "m": a.m,
        "queries": queries.len(),
        "keys": index.entries.len(),
        "sweep": sweep,
    }))?
    .with_series(series))
}
