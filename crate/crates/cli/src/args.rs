use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use embleak_core::private_hash::Selection;
use embleak_core::trace::Btag;

#[derive(Debug, Parser)]
#[command(name = "embleak", version, about = "Measure and exploit leakage from embedding-table access patterns")]
pub struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root seed for every random choice the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Record wall-clock duration in the manifest (reports stop being byte-identical).
    #[arg(long, global = true)]
    pub timing: bool,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic profiles and/or an access trace from a JSON config.
    Gen(GenArgs),
    /// Entropy and mutual information of one column before and after hashing.
    Stats(StatsArgs),
    /// Hash one column of a trace and write the hashed trace.
    HashApply(HashApplyArgs),
    /// Frequency attack on a modulo-mask hash: recover the mask, report top-K accuracy.
    AttackFreq(AttackFreqArgs),
    /// OMP attack on a private hash from consecutive-pair statistics.
    AttackOmp(AttackOmpArgs),
    /// Rank-matching baseline attack on a private hash.
    AttackGreedy(AttackGreedyArgs),
    /// k-anonymity of static profile features.
    Anonymity(AnonymityArgs),
    /// Per-item ambiguity of a group attribute.
    Ambiguity(AmbiguityArgs),
    /// How often a user's recent-purchase key is unique.
    ReidentUniqueness(UniquenessArgs),
    /// Link queries that share a key; precision/recall per time threshold.
    ReidentLink(LinkArgs),
    /// Exhaustive minimum-loss assignment for tiny instances, next to the OMP fit.
    Oracle(OracleArgs),
}

pub struct Outputs<'a> {
    pub report: Option<&'a PathBuf>,
    pub csv: Option<&'a PathBuf>,
}

impl Command {
    pub fn outputs(&self) -> Outputs<'_> {
        let (report, csv) = match self {
            Command::Gen(a) => (a.report.as_ref(), None),
            Command::Stats(a) => (a.out.as_ref(), None),
            Command::HashApply(a) => (a.report.as_ref(), None),
            Command::AttackFreq(a) => (a.out.as_ref(), a.csv.as_ref()),
            Command::AttackOmp(a) => (a.out.as_ref(), a.csv.as_ref()),
            Command::AttackGreedy(a) => (a.out.as_ref(), a.csv.as_ref()),
            Command::Anonymity(a) => (a.out.as_ref(), None),
            Command::Ambiguity(a) => (a.out.as_ref(), a.csv.as_ref()),
            Command::ReidentUniqueness(a) => (a.out.as_ref(), None),
            Command::ReidentLink(a) => (a.out.as_ref(), a.csv.as_ref()),
            Command::Oracle(a) => (a.out.as_ref(), None),
        };
        Outputs { report, csv }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// `(x + mask) mod P`
    Modulo,
    /// i.i.d. uniform output per input
    Map,
    /// every output gets floor(N/P) or ceil(N/P) inputs
    Balanced,
}

/// How the (secret) hash is chosen.
#[derive(Debug, Clone, Args)]
pub struct HashArgs {
    /// HashSpec JSON file; when given the other hash flags are ignored.
    #[arg(long)]
    pub hash: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Number of hash outputs.
    #[arg(long = "P")]
    pub p: Option<u32>,
    /// Outputs as a fraction of the column cardinality.
    #[arg(long = "P-ratio", conflicts_with = "p")]
    pub p_ratio: Option<f64>,
    /// Modulo mask; drawn from the seed when omitted.
    #[arg(long)]
    pub mask: Option<u32>,
}

/// Attacker-side prior and victim-side observations.
#[derive(Debug, Clone, Args)]
pub struct PairInput {
    /// Trace the attacker learns its prior from (pre-hash values).
    #[arg(long, requires = "observed", conflicts_with = "trace")]
    pub prior: Option<PathBuf>,
    /// Trace the victim serves; the tool hashes it and shows the attacker only the outputs.
    #[arg(long, requires = "prior")]
    pub observed: Option<PathBuf>,
    /// Single trace split by user into prior and observed parts.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Fraction of users on the prior side when splitting `--trace`.
    #[arg(long = "split-ratio", default_value_t = 0.5)]
    pub split_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BtagArg {
    Pv,
    Cart,
    Fav,
    Buy,
}

impl From<BtagArg> for Btag {
    fn from(b: BtagArg) -> Btag {
        match b {
            BtagArg::Pv => Btag::Browse,
            BtagArg::Cart => Btag::Cart,
            BtagArg::Fav => Btag::Favor,
            BtagArg::Buy => Btag::Buy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Freq,
    Full,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Selection {
        match s {
            SelectionArg::Freq => Selection::FrequencyOrdered,
            SelectionArg::Full => Selection::FullScan,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Event CSV (a `.dict.json` sidecar is written next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Profile CSV; defaults to `<out stem>.profiles.csv`.
    #[arg(long = "profiles-out")]
    pub profiles_out: Option<PathBuf>,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub column: String,
    #[command(flatten)]
    pub hash: HashArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HashApplyArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub column: String,
    #[command(flatten)]
    pub hash: HashArgs,
    /// Hashed event CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to save the HashSpec that was applied.
    #[arg(long = "spec-out")]
    pub spec_out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackFreqArgs {
    #[command(flatten)]
    pub input: PairInput,
    #[arg(long)]
    pub column: String,
    #[command(flatten)]
    pub hash: HashArgs,
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Curve as `k,accuracy` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackOmpArgs {
    #[command(flatten)]
    pub input: PairInput,
    #[arg(long)]
    pub column: String,
    #[command(flatten)]
    pub hash: HashArgs,
    #[arg(long, value_enum, default_value_t = SelectionArg::Freq)]
    pub selection: SelectionArg,
    #[arg(long, default_value_t = 20)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Only consecutive pairs of this interaction kind.
    #[arg(long, value_enum)]
    pub btag: Option<BtagArg>,
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss trajectory as `iteration,loss` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackGreedyArgs {
    #[command(flatten)]
    pub input: PairInput,
    #[arg(long)]
    pub column: String,
    #[command(flatten)]
    pub hash: HashArgs,
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Curve as `k,accuracy` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnonymityArgs {
    #[arg(long)]
    pub profiles: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub features: Vec<String>,
    #[arg(long = "k-max", default_value_t = 10)]
    pub k_max: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AmbiguityArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub profiles: PathBuf,
    #[arg(long)]
    pub item: String,
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, value_enum)]
    pub btag: Option<BtagArg>,
    /// Include every item's shares in the report.
    #[arg(long = "per-item")]
    pub per_item: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram as `bin_lo,bin_hi,pdf,cdf` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UniquenessArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Item column; the first feature column when omitted.
    #[arg(long)]
    pub item: Option<String>,
    /// Key lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub m: Vec<usize>,
    #[arg(long, default_value_t = 200_000)]
    pub samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Item column; the first feature column when omitted.
    #[arg(long)]
    pub item: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// Time thresholds in seconds, ascending, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,60,3600,86400,995000")]
    pub thresholds: Vec<i64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sweep as `threshold,precision,recall` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub input: PairInput,
    #[arg(long)]
    pub column: String,
    #[command(flatten)]
    pub hash: HashArgs,
    #[arg(long, value_enum)]
    pub btag: Option<BtagArg>,
    #[arg(long, default_value_t = 20)]
    pub sweeps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
