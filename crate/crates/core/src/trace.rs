//! Access traces, user profiles and the empirical distributions derived from
//! them.
//!
//! An [`AccessTrace`] is an immutable, time-ordered list of interactions.
//! Raw identifiers from input files are replaced by dense ids assigned in
//! first-appearance order; the [`Dictionaries`] that record this mapping are
//! persisted next to emitted traces so later runs see the same ids.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Interaction kind of a behavior-log row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Btag {
    Browse,
    Cart,
    Favor,
    Buy,
}

impl Btag {
    /// Accepts the Taobao spellings (`pv`, `cart`, `fav`, `buy`) as well as
    /// the long names.
    pub fn parse(s: &str) -> Option<Btag> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pv" | "browse" | "clk" | "click" => Some(Btag::Browse),
            "cart" => Some(Btag::Cart),
            "fav" | "favor" | "favorite" => Some(Btag::Favor),
            "buy" | "purchase" => Some(Btag::Buy),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Btag::Browse => "pv",
            Btag::Cart => "cart",
            Btag::Favor => "fav",
            Btag::Buy => "buy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub cardinality: u32,
}

impl Column {
    pub fn new(name: impl Into<String>, cardinality: u32) -> Self {
        Column {
            name: name.into(),
            cardinality,
        }
    }
}

/// Feature columns of a trace and whether rows carry an interaction kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSchema {
    pub columns: Vec<Column>,
    pub has_btag: bool,
}

impl TraceSchema {
    pub fn new(columns: Vec<Column>, has_btag: bool) -> Result<Self> {
        let schema = TraceSchema { columns, has_btag };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        for (i, c) in self.columns.iter().enumerate() {
            if c.cardinality == 0 {
                return Err(Error::Schema(format!("column `{}` has cardinality 0", c.name)));
            }
            if self.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn cardinality(&self, column: usize) -> u32 {
        self.columns[column].cardinality
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["timestamp".to_string(), "user_id".to_string()];
        if self.has_btag {
            h.push("btag".to_string());
        }
        h.extend(self.columns.iter().map(|c| c.name.clone()));
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessEvent {
    pub timestamp: i64,
    pub user_id: u32,
    pub btag: Btag,
    pub values: Vec<u32>,
}

/// Bijection between raw string ids and dense `u32` ids `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdDictionary {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dictionary mapping `"0".."n-1"` onto themselves.
    pub fn identity(n: u32) -> Self {
        let mut d = IdDictionary::new();
        for i in 0..n {
            d.intern(&i.to_string());
        }
        d
    }

    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len() as u32;
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, id: u32) -> Option<&str> {
        self.raw.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), serde_json::Value::from(i as u64)))
            .collect();
        serde_json::Value::Object(map)
    }

    fn from_json(name: &str, value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema(format!("dictionary `{name}` is not an object")))?;
        let mut raw = vec![None; obj.len()];
        for (k, v) in obj {
            let id = v
                .as_u64()
                .filter(|&id| (id as usize) < raw.len())
                .ok_or_else(|| Error::Schema(format!("dictionary `{name}`: bad id for `{k}`")))?;
            if raw[id as usize].replace(k.clone()).is_some() {
                return Err(Error::Schema(format!("dictionary `{name}`: id {id} used twice")));
            }
        }
        let mut d = IdDictionary::new();
        for r in raw {
            // every slot is filled: ids are distinct and < len
            d.intern(&r.expect("dense ids"));
        }
        Ok(d)
    }
}

/// Per-column raw→dense dictionaries, user ids included.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionaries {
    pub users: IdDictionary,
    pub columns: Vec<IdDictionary>,
}

impl Dictionaries {
    pub fn to_json(&self, schema: &TraceSchema) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("user_id".into(), self.users.to_json());
        for (c, d) in schema.columns.iter().zip(&self.columns) {
            map.insert(c.name.clone(), d.to_json());
        }
        serde_json::Value::Object(map)
    }

    /// Reads a sidecar for the given feature column names. Columns missing
    /// from the sidecar start with an empty dictionary.
    pub fn from_json(value: &serde_json::Value, column_names: &[String]) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("dictionary sidecar is not an object".into()))?;
        let users = match obj.get("user_id") {
            Some(v) => IdDictionary::from_json("user_id", v)?,
            None => IdDictionary::new(),
        };
        let columns = column_names
            .iter()
            .map(|n| match obj.get(n) {
                Some(v) => IdDictionary::from_json(n, v),
                None => Ok(IdDictionary::new()),
            })
            .collect::<Result<_>>()?;
        Ok(Dictionaries { users, columns })
    }

    pub fn load(path: &Path, column_names: &[String]) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_reader(BufReader::new(f))?;
        Self::from_json(&v, column_names)
    }
}

/// Conventional sidecar location for a trace file: `<path>.dict.json`.
pub fn dictionary_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dict.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTrace {
    schema: TraceSchema,
    events: Vec<AccessEvent>,
    dictionaries: Dictionaries,
}

impl AccessTrace {
    /// Validates the events against the schema and stable-sorts them by
    /// timestamp.
    pub fn new(
        schema: TraceSchema,
        mut events: Vec<AccessEvent>,
        dictionaries: Dictionaries,
    ) -> Result<Self> {
        schema.validate()?;
        if dictionaries.columns.len() != schema.columns.len() {
            return Err(Error::Schema(format!(
                "{} dictionaries for {} columns",
                dictionaries.columns.len(),
                schema.columns.len()
            )));
        }
        for (d, c) in dictionaries.columns.iter().zip(&schema.columns) {
            if d.len() > c.cardinality as usize {
                return Err(Error::Schema(format!(
                    "dictionary for `{}` holds {} ids, cardinality {}",
                    c.name,
                    d.len(),
                    c.cardinality
                )));
            }
        }
        for e in &events {
            if e.values.len() != schema.columns.len() {
                return Err(Error::Schema(format!(
                    "event has {} values, schema has {} columns",
                    e.values.len(),
                    schema.columns.len()
                )));
            }
            for (v, c) in e.values.iter().zip(&schema.columns) {
                if *v >= c.cardinality {
                    return Err(Error::Domain {
                        value: *v as u64,
                        size: c.cardinality as u64,
                        context: format!(" in column `{}`", c.name),
                    });
                }
            }
        }
        events.sort_by_key(|e| e.timestamp);
        Ok(AccessTrace {
            schema,
            events,
            dictionaries,
        })
    }

    pub fn schema(&self) -> &TraceSchema {
        &self.schema
    }

    pub fn events(&self) -> &[AccessEvent] {
        &self.events
    }

    pub fn dictionaries(&self) -> &Dictionaries {
        &self.dictionaries
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of dense user ids in the user dictionary (or one past the
    /// largest user id seen, whichever is larger).
    pub fn user_count(&self) -> usize {
        let max = self.events.iter().map(|e| e.user_id as usize + 1).max().unwrap_or(0);
        max.max(self.dictionaries.users.len())
    }

    /// Raw user id string, falling back to the dense id.
    pub fn raw_user(&self, user: u32) -> String {
        self.dictionaries
            .users
            .raw(user)
            .map(str::to_string)
            .unwrap_or_else(|| user.to_string())
    }

    pub fn time_span(&self) -> Option<(i64, i64)> {
        Some((self.events.first()?.timestamp, self.events.last()?.timestamp))
    }

    pub fn column_values(&self, column: usize) -> impl Iterator<Item = u32> + '_ {
        self.events.iter().map(move |e| e.values[column])
    }

    /// Same trace with the events of `column` rewritten and the schema and
    /// dictionary of that column replaced.
    pub(crate) fn with_column(
        &self,
        column: usize,
        new_column: Column,
        dictionary: IdDictionary,
        values: Vec<u32>,
    ) -> Result<AccessTrace> {
        let mut schema = self.schema.clone();
        schema.columns[column] = new_column;
        let mut dictionaries = self.dictionaries.clone();
        dictionaries.columns[column] = dictionary;
        let events = self
            .events
            .iter()
            .zip(values)
            .map(|(e, v)| {
                let mut e = e.clone();
                e.values[column] = v;
                e
            })
            .collect();
        AccessTrace::new(schema, events, dictionaries)
    }

    fn with_events(&self, events: Vec<AccessEvent>) -> AccessTrace {
        AccessTrace {
            schema: self.schema.clone(),
            events,
            dictionaries: self.dictionaries.clone(),
        }
    }

    /// Writes the trace as CSV with raw ids restored from the dictionaries.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("<trace output>", e);
        writeln!(w, "{}", self.schema.header().join(",")).map_err(io)?;
        for e in &self.events {
            write!(w, "{},", e.timestamp).map_err(io)?;
            match self.dictionaries.users.raw(e.user_id) {
                Some(r) => write!(w, "{r}"),
                None => write!(w, "{}", e.user_id),
            }
            .map_err(io)?;
            if self.schema.has_btag {
                write!(w, ",{}", e.btag.as_str()).map_err(io)?;
            }
            for (v, d) in e.values.iter().zip(&self.dictionaries.columns) {
                match d.raw(*v) {
                    Some(r) => write!(w, ",{r}"),
                    None => write!(w, ",{v}"),
                }
                .map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Writes `path` and its dictionary sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)?;
        let side = dictionary_sidecar(path);
        let mut s = serde_json::to_string(&self.dictionaries.to_json(&self.schema))?;
        s.push('\n');
        std::fs::write(&side, s).map_err(|e| Error::io(&side, e))
    }
}

/// Reads an event CSV whose feature columns must match `schema` by name and
/// order. Dense ids start from empty dictionaries.
pub fn ingest_events(path: &Path, schema: &TraceSchema) -> Result<AccessTrace> {
    ingest_events_with(path, Some(schema), None)
}

/// Reads an event CSV, optionally checking it against a schema and seeding
/// the dictionaries (for instance from a sidecar). Without a schema the
/// columns come from the header and each cardinality is the final
/// dictionary size.
pub fn ingest_events_with(
    path: &Path,
    schema: Option<&TraceSchema>,
    dictionaries: Option<Dictionaries>,
) -> Result<AccessTrace> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(f), schema, dictionaries)
}

/// Reads `path`, picking up `<path>.dict.json` when it exists.
pub fn load_events(path: &Path) -> Result<AccessTrace> {
    let side = dictionary_sidecar(path);
    let names = read_header(path)?;
    let features = feature_names(&names);
    let dicts = if side.exists() {
        Some(Dictionaries::load(&side, &features)?)
    } else {
        None
    };
    ingest_events_with(path, None, dicts)
}

/// Loads two traces into one id space: the second file reuses and extends
/// the first one's dictionaries, and the first is re-read with the result so
/// both report the same cardinalities.
pub fn load_event_pair(first: &Path, second: &Path) -> Result<(AccessTrace, AccessTrace)> {
    let a = load_events(first)?;
    let b = ingest_events_with(second, None, Some(a.dictionaries().clone()))?;
    if b.schema().header() != a.schema().header() {
        return Err(Error::Schema(format!(
            "{} and {} have different columns",
            first.display(),
            second.display()
        )));
    }
    if b.dictionaries() == a.dictionaries() {
        return Ok((a, b));
    }
    let a = ingest_events_with(first, None, Some(b.dictionaries().clone()))?;
    Ok((a, b))
}

fn read_header(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(f));
    let h = rdr
        .headers()
        .map_err(|e| Error::Malformed { line: 1, message: e.to_string() })?;
    Ok(h.iter().map(|s| s.trim().to_string()).collect())
}

fn header_has_btag(names: &[String]) -> bool {
    names.get(2).is_some_and(|n| n.eq_ignore_ascii_case("btag"))
}

fn feature_names(names: &[String]) -> Vec<String> {
    let skip = if header_has_btag(names) { 3 } else { 2 };
    names.iter().skip(skip).cloned().collect()
}

pub fn parse_events<R: Read>(
    input: R,
    schema: Option<&TraceSchema>,
    dictionaries: Option<Dictionaries>,
) -> Result<AccessTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Malformed { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header.iter().all(String::is_empty) {
        return Err(Error::Schema("header needs at least timestamp and user columns".into()));
    }
    let has_btag = match schema {
        Some(s) => s.has_btag,
        None => header_has_btag(&header),
    };
    let first_feature = if has_btag { 3 } else { 2 };
    let names: Vec<String> = header.iter().skip(first_feature).cloned().collect();
    if let Some(s) = schema {
        if has_btag && !header_has_btag(&header) {
            return Err(Error::Schema("schema expects a btag column".into()));
        }
        let expected: Vec<&str> = s.columns.iter().map(|c| c.name.as_str()).collect();
        if let Some(unknown) = names.iter().find(|n| !expected.contains(&n.as_str())) {
            return Err(Error::Schema(format!("unknown column `{unknown}`")));
        }
        if names.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::Schema(format!(
                "header columns {names:?} do not match schema {expected:?}"
            )));
        }
    }

    let mut dicts = dictionaries.unwrap_or_default();
    if dicts.columns.is_empty() {
        dicts.columns = vec![IdDictionary::new(); names.len()];
    } else if dicts.columns.len() != names.len() {
        return Err(Error::Schema("dictionary count does not match columns".into()));
    }

    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(Error::Malformed { line, message: e.to_string() });
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let timestamp: i64 = record[0].parse().map_err(|_| Error::Malformed {
            line,
            message: format!("timestamp `{}` is not an integer", &record[0]),
        })?;
        if record[1].is_empty() {
            return Err(Error::Malformed { line, message: "empty user id".into() });
        }
        let user_id = dicts.users.intern(&record[1]);
        let btag = if has_btag {
            Btag::parse(&record[2]).ok_or_else(|| Error::Malformed {
                line,
                message: format!("unknown btag `{}`", &record[2]),
            })?
        } else {
            Btag::Browse
        };
        let mut values = Vec::with_capacity(names.len());
        for (i, field) in record.iter().skip(first_feature).enumerate() {
            let id = dicts.columns[i].intern(field);
            if let Some(s) = schema {
                if id >= s.columns[i].cardinality {
                    return Err(Error::Malformed {
                        line,
                        message: format!(
                            "column `{}` exceeds declared cardinality {}",
                            names[i], s.columns[i].cardinality
                        ),
                    });
                }
            }
            values.push(id);
        }
        events.push(AccessEvent { timestamp, user_id, btag, values });
    }

    let schema = match schema {
        Some(s) => s.clone(),
        None => TraceSchema::new(
            names
                .iter()
                .zip(&dicts.columns)
                .map(|(n, d)| Column::new(n.clone(), d.len().max(1) as u32))
                .collect(),
            has_btag,
        )?,
    };
    AccessTrace::new(schema, events, dicts)
}

/// Static per-user features keyed by the integer user id from the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileTable {
    pub features: Vec<Column>,
    pub rows: BTreeMap<u32, Vec<u32>>,
    /// Rows dropped because a later row reused the same user id.
    pub duplicate_rows: u64,
}

impl ProfileTable {
    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("<profile output>", e);
        let mut header = vec!["user_id".to_string()];
        header.extend(self.features.iter().map(|c| c.name.clone()));
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (user, row) in &self.rows {
            write!(w, "{user}").map_err(io)?;
            for v in row {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

pub fn ingest_profiles(path: &Path) -> Result<ProfileTable> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_profiles(BufReader::new(f))
}

/// Parses `user_id,<feature...>` rows. Each feature's cardinality is one past
/// its largest value. A repeated user id replaces the earlier row.
pub fn parse_profiles<R: Read>(input: R) -> Result<ProfileTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Malformed { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header[0].is_empty() {
        return Err(Error::Schema("profile header missing".into()));
    }
    let names = &header[1..];
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::Schema(format!("duplicate column `{n}`")));
        }
    }
    let mut rows = BTreeMap::new();
    let mut duplicate_rows = 0;
    let mut max = vec![0u32; names.len()];
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(Error::Malformed { line, message: e.to_string() });
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<u32> {
            record[i].parse::<u32>().map_err(|_| Error::Malformed {
                line,
                message: format!("field `{}` = `{}` is not a non-negative integer", header[i], &record[i]),
            })
        };
        if record.len() != header.len() {
            return Err(Error::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let user = parse(0)?;
        let row = (1..header.len()).map(parse).collect::<Result<Vec<_>>>()?;
        for (m, v) in max.iter_mut().zip(&row) {
            *m = (*m).max(*v);
        }
        if rows.insert(user, row).is_some() {
            duplicate_rows += 1;
        }
    }
    if duplicate_rows > 0 {
        log::warn!("{duplicate_rows} duplicate profile rows; last row kept");
    }
    let features = names
        .iter()
        .zip(max)
        .map(|(n, m)| Column::new(n.clone(), m + 1))
        .collect();
    Ok(ProfileTable { features, rows, duplicate_rows })
}

/// Empirical marginal over a domain of size `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    pub n: usize,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
}

impl CategoricalDistribution {
    /// Normalizes counts. All-zero counts give all-zero probabilities.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let probs = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        CategoricalDistribution { n: counts.len(), counts, probs }
    }

    /// A distribution known analytically; counts are left at zero.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {s}, expected 1")));
        }
        Ok(CategoricalDistribution { n: probs.len(), counts: vec![0; probs.len()], probs })
    }

    pub fn from_values(n: usize, values: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut counts = vec![0u64; n];
        for v in values {
            let slot = counts.get_mut(v as usize).ok_or(Error::Domain {
                value: v as u64,
                size: n as u64,
                context: String::new(),
            })?;
            *slot += 1;
        }
        Ok(Self::from_counts(counts))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Joint distribution of ordered (earlier, later) pairs over one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDistribution {
    pub n: usize,
    pub entries: BTreeMap<(u32, u32), f64>,
    pub counts: BTreeMap<(u32, u32), u64>,
    pub total_count: u64,
}

impl PairDistribution {
    pub fn from_counts(n: usize, counts: BTreeMap<(u32, u32), u64>) -> Result<Self> {
        if let Some(&(a, b)) = counts.keys().find(|(a, b)| *a as usize >= n || *b as usize >= n) {
            return Err(Error::Domain {
                value: a.max(b) as u64,
                size: n as u64,
                context: " in pair".into(),
            });
        }
        let total_count: u64 = counts.values().sum();
        if total_count == 0 {
            return Err(Error::Empty("no pairs".into()));
        }
        let entries = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&k, &c)| (k, c as f64 / total_count as f64))
            .collect();
        Ok(PairDistribution { n, entries, counts, total_count })
    }

    /// Analytic joint; entries must sum to one.
    pub fn from_probs(n: usize, entries: BTreeMap<(u32, u32), f64>) -> Result<Self> {
        if entries.keys().any(|(a, b)| *a as usize >= n || *b as usize >= n) {
            return Err(Error::invalid("pair entry outside domain"));
        }
        let s: f64 = entries.values().sum();
        if (s - 1.0).abs() > 1e-9 || entries.values().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid(format!("pair probabilities sum to {s}, expected 1")));
        }
        let entries = entries.into_iter().filter(|(_, p)| *p > 0.0).collect();
        Ok(PairDistribution { n, entries, counts: BTreeMap::new(), total_count: 0 })
    }

    pub fn get(&self, a: u32, b: u32) -> f64 {
        self.entries.get(&(a, b)).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Marginal of the earlier element.
    pub fn first_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for (&(a, _), p) in &self.entries {
            m[a as usize] += p;
        }
        m
    }

    /// Marginal of the later element.
    pub fn second_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for (&(_, b), p) in &self.entries {
            m[b as usize] += p;
        }
        m
    }
}

pub fn empirical_distribution(trace: &AccessTrace, column: &str) -> Result<CategoricalDistribution> {
    let c = trace.schema().column_index(column)?;
    if trace.is_empty() {
        return Err(Error::Empty("empty trace".into()));
    }
    CategoricalDistribution::from_values(trace.schema().cardinality(c) as usize, trace.column_values(c))
}

/// Consecutive-pair distribution over all interaction kinds.
pub fn pair_distribution(trace: &AccessTrace, column: &str) -> Result<PairDistribution> {
    pair_distribution_filtered(trace, column, None)
}

/// Consecutive-pair distribution restricted to events of one interaction
/// kind (`Some(Btag::Buy)` gives purchase-to-purchase pairs). Pairs never
/// span users.
pub fn pair_distribution_filtered(
    trace: &AccessTrace,
    column: &str,
    btag: Option<Btag>,
) -> Result<PairDistribution> {
    let c = trace.schema().column_index(column)?;
    let mut last: HashMap<u32, u32> = HashMap::new();
    let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for e in trace.events() {
        if btag.is_some_and(|b| b != e.btag) {
            continue;
        }
        let v = e.values[c];
        if let Some(prev) = last.insert(e.user_id, v) {
            *counts.entry((prev, v)).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("no user has two or more events".into()));
    }
    PairDistribution::from_counts(trace.schema().cardinality(c) as usize, counts)
}

/// User-disjoint split. A user lands in `train` when a seeded hash of its id
/// falls below `ratio`.
pub fn split_trace(trace: &AccessTrace, ratio: f64, seed: u64) -> Result<(AccessTrace, AccessTrace)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    let (train, eval): (Vec<_>, Vec<_>) = trace
        .events()
        .iter()
        .cloned()
        .partition(|e| rng::unit_hash(seed, e.user_id as u64) < ratio);
    Ok((trace.with_events(train), trace.with_events(eval)))
}

/// Whether `user` goes to the train side of [`split_trace`].
pub fn split_side_is_train(user: u32, ratio: f64, seed: u64) -> bool {
    rng::unit_hash(seed, user as u64) < ratio
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_column(values: &[(i64, u32, u32)], card: u32) -> AccessTrace {
        let schema = TraceSchema::new(vec![Column::new("c", card)], false).unwrap();
        let events = values
            .iter()
            .map(|&(t, u, v)| AccessEvent { timestamp: t, user_id: u, btag: Btag::Browse, values: vec![v] })
            .collect();
        let dicts = Dictionaries { users: IdDictionary::new(), columns: vec![IdDictionary::new()] };
        AccessTrace::new(schema, events, dicts).unwrap()
    }

    #[test]
    fn ingest_sorts_and_assigns_first_appearance_ids() {
        let csv = "ts,user,cat\n5,u1,apple\n4,u2,pear\n";
        let t = parse_events(csv.as_bytes(), None, None).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.events()[0].timestamp, 4);
        assert_eq!(t.events()[1].timestamp, 5);
        let d = t.dictionaries();
        assert_eq!(d.users.get("u1"), Some(0));
        assert_eq!(d.users.get("u2"), Some(1));
        assert_eq!(d.columns[0].get("apple"), Some(0));
        assert_eq!(d.columns[0].get("pear"), Some(1));
        assert_eq!(t.events()[0].user_id, 1);
        assert_eq!(t.events()[0].values, vec![1]);
    }

    #[test]
    fn header_only_gives_empty_trace() {
        let t = parse_events("timestamp,user_id,cat\n".as_bytes(), None, None).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "timestamp,user_id,cat\n1,a,x\nnope,b,y\n";
        match parse_events(csv.as_bytes(), None, None) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_mismatch_on_unknown_column() {
        let schema = TraceSchema::new(vec![Column::new("cat", 10)], false).unwrap();
        let err = parse_events("timestamp,user_id,brand\n".as_bytes(), Some(&schema), None).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
    }

    #[test]
    fn declared_cardinality_is_enforced() {
        let schema = TraceSchema::new(vec![Column::new("cat", 1)], false).unwrap();
        let csv = "timestamp,user_id,cat\n1,a,x\n2,a,y\n";
        let err = parse_events(csv.as_bytes(), Some(&schema), None).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn ties_keep_file_order() {
        let csv = "timestamp,user_id,btag,cat\n3,a,buy,x\n1,a,pv,y\n3,a,buy,z\n";
        let t = parse_events(csv.as_bytes(), None, None).unwrap();
        let vals: Vec<u32> = t.column_values(0).collect();
        assert_eq!(vals, vec![1, 0, 2]);
        assert_eq!(t.events()[0].btag, Btag::Browse);
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let csv = "timestamp,user_id,btag,cat,brand\n9,bob,buy,x,k\n2,al,pv,y,k\n2,bob,fav,x,m\n";
        let t = parse_events(csv.as_bytes(), None, None).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let side = t.dictionaries().to_json(t.schema());
        let names: Vec<String> = t.schema().columns.iter().map(|c| c.name.clone()).collect();
        let dicts = Dictionaries::from_json(&side, &names).unwrap();
        let back = parse_events(out.as_slice(), None, Some(dicts)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn profiles_last_duplicate_wins() {
        let csv = "user_id,age,gender\n7,1,2\n9,3,1\n7,4,1\n";
        let p = parse_profiles(csv.as_bytes()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.duplicate_rows, 1);
        assert_eq!(p.rows[&7], vec![4, 1]);
        assert_eq!(p.features[0].cardinality, 5);
    }

    #[test]
    fn profiles_reject_non_integer() {
        let err = parse_profiles("user_id,age\n1,young\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn empirical_distribution_examples() {
        let t = single_column(&[(0, 0, 0), (1, 0, 0), (2, 0, 1), (3, 0, 2)], 3);
        let d = empirical_distribution(&t, "c").unwrap();
        assert_eq!(d.probs, vec![0.5, 0.25, 0.25]);
        assert_eq!(d.counts, vec![2, 1, 1]);

        let t = single_column(&[(0, 0, 0)], 2);
        assert_eq!(empirical_distribution(&t, "c").unwrap().probs, vec![1.0, 0.0]);

        let t = single_column(&[], 2);
        assert!(matches!(empirical_distribution(&t, "c"), Err(Error::Empty(_))));
        assert!(matches!(empirical_distribution(&t, "zz"), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn pair_distribution_examples() {
        let t = single_column(&[(0, 0, 3), (1, 0, 5), (2, 0, 3)], 6);
        let p = pair_distribution(&t, "c").unwrap();
        assert_eq!(p.entries.len(), 2);
        assert_eq!(p.get(3, 5), 0.5);
        assert_eq!(p.get(5, 3), 0.5);

        let t = single_column(&[(0, 0, 1), (1, 1, 2)], 3);
        assert!(matches!(pair_distribution(&t, "c"), Err(Error::Empty(_))));
    }

    #[test]
    fn pairs_do_not_span_users_and_respect_filter() {
        let csv = "timestamp,user_id,btag,c\n1,a,buy,0\n2,b,buy,1\n3,a,pv,2\n4,a,buy,3\n5,b,buy,4\n";
        let t = parse_events(csv.as_bytes(), None, None).unwrap();
        let all = pair_distribution(&t, "c").unwrap();
        assert_eq!(all.total_count, 3);
        assert!(all.counts.contains_key(&(0, 2)) && all.counts.contains_key(&(2, 3)));
        assert!(all.counts.contains_key(&(1, 4)));
        let buys = pair_distribution_filtered(&t, "c", Some(Btag::Buy)).unwrap();
        assert_eq!(buys.total_count, 2);
        assert_eq!(buys.counts[&(0, 3)], 1);
    }

    #[test]
    fn split_partitions_by_user() {
        let t = single_column(&[(0, 0, 0), (1, 1, 1), (2, 0, 1), (3, 1, 0)], 2);
        let (a, b) = split_trace(&t, 0.5, 11).unwrap();
        assert_eq!(a.len() + b.len(), t.len());
        for e in a.events() {
            assert!(b.events().iter().all(|o| o.user_id != e.user_id));
        }
        let (a2, b2) = split_trace(&t, 0.5, 11).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(split_trace(&t, 1.0, 0).is_err());
        assert!(split_trace(&t, 0.0, 0).is_err());
    }
}
