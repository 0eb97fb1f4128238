//! gem5 `stats.txt` parsing and counter extraction.
//!
//! A dump contains one or more sections bracketed by the begin/end marker
//! lines. Each stat line is `<name> <value> [# <description>]`; distribution
//! stats may carry extra columns (pdf/cdf percentages) which are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use indexmap::IndexMap;
use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CacheCounterSet, CacheTopology, StatVector};

pub const BEGIN_MARKER: &str = "---------- Begin Simulation Statistics ----------";
pub const END_MARKER: &str = "---------- End Simulation Statistics ----------";
/// End marker as padded by gem5's text writer.
pub const END_MARKER_PADDED: &str = "---------- End Simulation Statistics   ----------";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub name: String,
    pub value: f64,
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawStatsDump {
    pub snapshot_index: usize,
    pub entries: Vec<StatEntry>,
}

impl RawStatsDump {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    /// Serialize back into one begin/end-delimited section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push('\n');
        out.push_str(BEGIN_MARKER);
        out.push('\n');
        for e in &self.entries {
            let _ = write!(out, "{:<60} {:>20}", e.name, format_value(e.value));
            if let Some(desc) = &e.description {
                let _ = write!(out, " # {desc}");
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(END_MARKER);
        out.push('\n');
        out
    }

    /// Bitwise equality, treating NaN payloads as equal.
    pub fn same_as(&self, other: &RawStatsDump) -> bool {
        self.snapshot_index == other.snapshot_index
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.description == b.description
                    && (a.value.to_bits() == b.value.to_bits() || (a.value.is_nan() && b.value.is_nan()))
            })
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

pub fn dumps_to_text(dumps: &[RawStatsDump]) -> String {
    dumps.iter().map(RawStatsDump::to_text).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// Lines inside a section that did not follow the stat grammar.
    pub skipped_lines: usize,
    /// Entries whose value was `nan` or `inf`.
    pub non_finite_values: usize,
    /// Names that appeared more than once in one snapshot; the first wins.
    pub duplicate_names: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedStats {
    pub dumps: Vec<RawStatsDump>,
    pub warnings: ParseWarnings,
}

impl ParsedStats {
    /// Default snapshot selection: the final dump covers the whole run.
    pub fn last(&self) -> &RawStatsDump {
        self.dumps.last().expect("parse guarantees at least one snapshot")
    }

    pub fn snapshot(&self, index: Option<usize>) -> Result<&RawStatsDump> {
        match index {
            None => Ok(self.last()),
            Some(i) => self
                .dumps
                .get(i)
                .ok_or_else(|| Error::invalid(format!("snapshot {i} not found ({} present)", self.dumps.len()))),
        }
    }
}

fn is_begin(line: &str) -> bool {
    line.trim() == BEGIN_MARKER
}

fn is_end(line: &str) -> bool {
    let t = line.trim();
    t == END_MARKER || t == END_MARKER_PADDED
}

fn parse_value(token: &str) -> Option<f64> {
    match token.to_ascii_lowercase().as_str() {
        "nan" | "-nan" => Some(f64::NAN),
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => token.parse().ok(),
    }
}

fn parse_line(line: &str) -> Option<StatEntry> {
    let (body, description) = match line.find('#') {
        Some(pos) => {
            let desc = line[pos + 1..].trim();
            (&line[..pos], (!desc.is_empty()).then(|| desc.to_string()))
        }
        None => (line, None),
    };
    let mut tokens = body.split_whitespace();
    let name = tokens.next()?;
    let value = parse_value(tokens.next()?)?;
    Some(StatEntry {
        name: name.to_string(),
        value,
        description,
    })
}

pub fn parse_stats_text(text: &str) -> Result<ParsedStats> {
    let mut dumps = Vec::new();
    let mut warnings = ParseWarnings::default();
    let mut current: Option<(Vec<StatEntry>, HashSet<String>)> = None;

    for line in text.lines() {
        if is_begin(line) {
            if let Some((entries, _)) = current.take() {
                dumps.push(RawStatsDump {
                    snapshot_index: dumps.len(),
                    entries,
                });
            }
            current = Some((Vec::new(), HashSet::new()));
            continue;
        }
        if is_end(line) {
            if let Some((entries, _)) = current.take() {
                dumps.push(RawStatsDump {
                    snapshot_index: dumps.len(),
                    entries,
                });
            }
            continue;
        }
        let Some((entries, seen)) = current.as_mut() else {
            continue;
        };
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Some(entry) => {
                if !entry.value.is_finite() {
                    warnings.non_finite_values += 1;
                }
                if seen.insert(entry.name.clone()) {
                    entries.push(entry);
                } else {
                    warnings.duplicate_names += 1;
                }
            }
            None => warnings.skipped_lines += 1,
        }
    }
    if let Some((entries, _)) = current.take() {
        dumps.push(RawStatsDump {
            snapshot_index: dumps.len(),
            entries,
        });
    }
    if dumps.is_empty() {
        return Err(Error::NoStatisticsSection);
    }
    if warnings.skipped_lines > 0 {
        warn!("skipped {} unparseable stat lines", warnings.skipped_lines);
    }
    if warnings.non_finite_values > 0 {
        warn!("{} stat values are nan/inf", warnings.non_finite_values);
    }
    Ok(ParsedStats { dumps, warnings })
}

/// Role → stat-name pattern. Patterns are exact names or globs using `*`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatsMapping {
    pub patterns: IndexMap<String, String>,
}

pub const ROLE_TOTAL_INSTRUCTIONS: &str = "total_instructions";
pub const ROLE_LOADS: &str = "loads";
pub const ROLE_STORES: &str = "stores";
pub const ROLE_BRANCHES: &str = "branches";

pub const CACHE_COUNTER_ROLES: [&str; 8] = [
    "read_accesses",
    "read_hits",
    "read_misses",
    "read_replacements",
    "write_accesses",
    "write_hits",
    "write_misses",
    "write_replacements",
];

/// Every role a topology needs, in canonical order.
pub fn required_roles(topology: &CacheTopology) -> Vec<String> {
    let mut roles: Vec<String> = [ROLE_TOTAL_INSTRUCTIONS, ROLE_LOADS, ROLE_STORES, ROLE_BRANCHES]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for level in topology.level_names() {
        for counter in CACHE_COUNTER_ROLES {
            roles.push(format!("{level}.{counter}"));
        }
    }
    roles
}

/// gem5 object path conventionally used for each cache level.
fn gem5_cache_object(level: &str) -> String {
    match level {
        "L1D" => "system.cpu.dcache".to_string(),
        "L1I" => "system.cpu.icache".to_string(),
        "L2" => "system.l2".to_string(),
        "L3" => "system.l3".to_string(),
        other => format!("system.{}", other.to_ascii_lowercase()),
    }
}

impl StatsMapping {
    /// Mapping for the counter names written by the mock simulator, which
    /// follow classic-cache gem5 naming (`<cache>.ReadReq.hits::total`).
    pub fn gem5_default(topology: &CacheTopology) -> Self {
        let mut patterns = IndexMap::new();
        patterns.insert(ROLE_TOTAL_INSTRUCTIONS.to_string(), "simInsts".to_string());
        patterns.insert(ROLE_LOADS.to_string(), "system.cpu.num_load_insts".to_string());
        patterns.insert(ROLE_STORES.to_string(), "system.cpu.num_store_insts".to_string());
        patterns.insert(ROLE_BRANCHES.to_string(), "system.cpu.Branches".to_string());
        for level in topology.level_names() {
            let obj = gem5_cache_object(level);
            for counter in CACHE_COUNTER_ROLES {
                let (req, stat) = counter.split_once('_').expect("role has a direction");
                let req = if req == "read" { "ReadReq" } else { "WriteReq" };
                patterns.insert(format!("{level}.{counter}"), format!("{obj}.{req}.{stat}::total"));
            }
        }
        Self { patterns }
    }

    pub fn check_covers(&self, topology: &CacheTopology) -> Result<()> {
        let missing: Vec<String> = required_roles(topology)
            .into_iter()
            .filter(|r| !self.patterns.contains_key(r))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("mapping lacks roles: {}", missing.join(", "))))
        }
    }
}

enum Matcher {
    Exact(String),
    Glob(Regex),
}

impl Matcher {
    fn new(pattern: &str) -> Result<Self> {
        if !pattern.contains('*') {
            return Ok(Matcher::Exact(pattern.to_string()));
        }
        let body = pattern.split('*').map(regex::escape).collect::<Vec<_>>().join(".*");
        Regex::new(&format!("^{body}$"))
            .map(Matcher::Glob)
            .map_err(|e| Error::invalid(format!("bad pattern {pattern}: {e}")))
    }

    fn matches(&self, name: &str) -> bool {
        match self {
            Matcher::Exact(s) => s == name,
            Matcher::Glob(re) => re.is_match(name),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtractWarnings {
    /// Roles that matched no entry and were set to 0.
    pub unmatched_roles: Vec<String>,
    /// Counter identities (hits + misses = accesses) that do not hold.
    pub inconsistent_counters: Vec<String>,
    /// Roles whose summed value was negative, fractional or non-finite.
    pub coerced_values: Vec<String>,
}

/// Resolve each role to a counter value: sum of all matching entries,
/// or 0 with a warning when nothing matches.
pub fn extract_stat_vector(
    dump: &RawStatsDump,
    mapping: &StatsMapping,
    topology: &CacheTopology,
) -> Result<(StatVector, ExtractWarnings)> {
    mapping.check_covers(topology)?;
    let mut warnings = ExtractWarnings::default();
    let mut values: HashMap<String, u64> = HashMap::new();
    for role in required_roles(topology) {
        let matcher = Matcher::new(&mapping.patterns[&role])?;
        let mut sum = 0.0;
        let mut hits = 0usize;
        for e in dump.entries.iter().filter(|e| matcher.matches(&e.name)) {
            sum += e.value;
            hits += 1;
        }
        if hits == 0 {
            warn!("role {role}: no stat matches {:?}, using 0", mapping.patterns[&role]);
            warnings.unmatched_roles.push(role.clone());
        }
        let value = if sum.is_finite() && sum >= 0.0 && sum.fract() == 0.0 {
            sum as u64
        } else {
            warnings.coerced_values.push(role.clone());
            if sum.is_finite() && sum > 0.0 {
                sum.round() as u64
            } else {
                0
            }
        };
        values.insert(role, value);
    }

    let total_instructions = values[ROLE_TOTAL_INSTRUCTIONS];
    if total_instructions == 0 {
        return Err(Error::EmptyExecution);
    }
    let mut per_cache = BTreeMap::new();
    for level in topology.level_names() {
        let get = |c: &str| values[&format!("{level}.{c}")];
        let counters = CacheCounterSet {
            read_accesses: get("read_accesses"),
            read_hits: get("read_hits"),
            read_misses: get("read_misses"),
            read_replacements: get("read_replacements"),
            write_accesses: get("write_accesses"),
            write_hits: get("write_hits"),
            write_misses: get("write_misses"),
            write_replacements: get("write_replacements"),
        };
        for w in counters.consistency_warnings() {
            warn!("{level}: {w}");
            warnings.inconsistent_counters.push(format!("{level}: {w}"));
        }
        per_cache.insert(level.to_string(), counters);
    }
    let stats = StatVector {
        total_instructions,
        loads: values[ROLE_LOADS],
        stores: values[ROLE_STORES],
        branches: values[ROLE_BRANCHES],
        per_cache,
    };
    Ok((stats, warnings))
}

/// Render a `StatVector` as a single-section stats file under `mapping`'s
/// names. Every mapping pattern must be an exact name.
pub fn render_stat_vector(stats: &StatVector, mapping: &StatsMapping, topology: &CacheTopology) -> Result<String> {
    mapping.check_covers(topology)?;
    let mut entries = Vec::new();
    let mut push = |role: &str, value: u64, desc: &str| -> Result<()> {
        let name = &mapping.patterns[role];
        if name.contains('*') {
            return Err(Error::invalid(format!("cannot render glob pattern {name}")));
        }
        entries.push(StatEntry {
            name: name.clone(),
            value: value as f64,
            description: Some(desc.to_string()),
        });
        Ok(())
    };
    push(
        ROLE_TOTAL_INSTRUCTIONS,
        stats.total_instructions,
        "Number of instructions simulated (Count)",
    )?;
    push(ROLE_LOADS, stats.loads, "Number of load instructions (Count)")?;
    push(ROLE_STORES, stats.stores, "Number of store instructions (Count)")?;
    push(ROLE_BRANCHES, stats.branches, "Number of branches fetched (Count)")?;
    for level in topology.level_names() {
        let c = stats.cache(level);
        let values = [
            c.read_accesses,
            c.read_hits,
            c.read_misses,
            c.read_replacements,
            c.write_accesses,
            c.write_hits,
            c.write_misses,
            c.write_replacements,
        ];
        for (counter, value) in CACHE_COUNTER_ROLES.iter().zip(values) {
            push(
                &format!("{level}.{counter}"),
                value,
                &format!("number of {} (Count)", counter.replace('_', " ")),
            )?;
        }
    }
    Ok(RawStatsDump {
        snapshot_index: 0,
        entries,
    }
    .to_text())
}
