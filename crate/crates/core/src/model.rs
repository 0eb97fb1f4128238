//! Domain types shared across the crate: cache topologies, kernel groups,
//! simulator counters, implementation records and the feature schema.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_LINE_SIZE: u64 = 64;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Number of instruction-mix ratios at the head of the raw block.
pub const MIX_FEATURES: usize = 3;
/// Ratios contributed by each cache level.
pub const CACHE_FEATURES: usize = 6;

pub(crate) const MIX_NAMES: [&str; MIX_FEATURES] = ["load_frac", "store_frac", "branch_frac"];
pub(crate) const CACHE_RATIO_NAMES: [&str; CACHE_FEATURES] = [
    "rd_hit_ratio",
    "rd_miss_ratio",
    "rd_repl_ratio",
    "wr_hit_ratio",
    "wr_miss_ratio",
    "wr_repl_ratio",
];
pub(crate) const INST_REL_NAME: &str = "inst_count_group_rel";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLevelSpec {
    pub name: String,
    pub size_bytes: u64,
    pub sets: u64,
    pub associativity: u64,
}

impl CacheLevelSpec {
    pub fn new(name: &str, size_bytes: u64, sets: u64, associativity: u64) -> Self {
        Self {
            name: name.to_string(),
            size_bytes,
            sets,
            associativity,
        }
    }
}

fn default_line_size() -> u64 {
    DEFAULT_LINE_SIZE
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheTopology {
    pub architecture: String,
    #[serde(default = "default_line_size")]
    pub line_size_bytes: u64,
    pub levels: Vec<CacheLevelSpec>,
}

impl CacheTopology {
    pub fn new(architecture: &str, levels: Vec<CacheLevelSpec>) -> Result<Self> {
        let topo = Self {
            architecture: architecture.to_string(),
            line_size_bytes: DEFAULT_LINE_SIZE,
            levels,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidTopology("at least one cache level is required".into()));
        }
        if self.line_size_bytes == 0 {
            return Err(Error::InvalidTopology("line size must be positive".into()));
        }
        let mut seen = HashSet::new();
        for level in &self.levels {
            if !seen.insert(level.name.as_str()) {
                return Err(Error::InvalidTopology(format!("duplicate level {}", level.name)));
            }
            if level.size_bytes == 0 || level.sets == 0 || level.associativity == 0 {
                return Err(Error::InvalidTopology(format!(
                    "level {} has a zero dimension",
                    level.name
                )));
            }
            let implied = level.sets * level.associativity * self.line_size_bytes;
            if implied != level.size_bytes {
                return Err(Error::InvalidTopology(format!(
                    "level {}: {} sets x {} ways x {} B = {} B, declared {} B",
                    level.name, level.sets, level.associativity, self.line_size_bytes, implied, level.size_bytes
                )));
            }
        }
        Ok(())
    }

    pub fn level_names(&self) -> impl Iterator<Item = &str> {
        self.levels.iter().map(|l| l.name.as_str())
    }

    /// AMD Ryzen 7 5800X hierarchy.
    pub fn x86() -> Self {
        Self {
            architecture: "x86".into(),
            line_size_bytes: DEFAULT_LINE_SIZE,
            levels: vec![
                CacheLevelSpec::new("L1D", 32 << 10, 64, 8),
                CacheLevelSpec::new("L1I", 32 << 10, 64, 8),
                CacheLevelSpec::new("L2", 512 << 10, 1024, 8),
                CacheLevelSpec::new("L3", 32768 << 10, 32768, 16),
            ],
        }
    }

    /// Cortex-A72 (Raspberry Pi 4) hierarchy.
    pub fn arm() -> Self {
        Self {
            architecture: "arm".into(),
            line_size_bytes: DEFAULT_LINE_SIZE,
            levels: vec![
                CacheLevelSpec::new("L1D", 32 << 10, 256, 2),
                CacheLevelSpec::new("L1I", 48 << 10, 256, 3),
                CacheLevelSpec::new("L2", 1024 << 10, 1024, 16),
            ],
        }
    }

    /// SiFive U74-MC hierarchy.
    pub fn riscv() -> Self {
        Self {
            architecture: "riscv".into(),
            line_size_bytes: DEFAULT_LINE_SIZE,
            levels: vec![
                CacheLevelSpec::new("L1D", 32 << 10, 64, 8),
                CacheLevelSpec::new("L1I", 32 << 10, 64, 8),
                CacheLevelSpec::new("L2", 2048 << 10, 2048, 16),
            ],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "x86" => Some(Self::x86()),
            "arm" => Some(Self::arm()),
            "riscv" => Some(Self::riscv()),
            _ => None,
        }
    }
}

/// A kernel parameter: a scalar (`CO`) or a pair (`stride`, `pad`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Pair([i64; 2]),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub kernel_type: String,
    pub group_id: u32,
}

impl GroupKey {
    pub fn new(kernel_type: &str, group_id: u32) -> Self {
        Self {
            kernel_type: kernel_type.to_string(),
            group_id,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.kernel_type, self.group_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGroup {
    pub kernel_type: String,
    pub group_id: u32,
    #[serde(default)]
    pub params: IndexMap<String, ParamValue>,
}

impl KernelGroup {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(&self.kernel_type, self.group_id)
    }

    pub fn int_param(&self, name: &str) -> Option<i64> {
        match self.params.get(name)? {
            ParamValue::Int(v) => Some(*v),
            ParamValue::Pair([a, _]) => Some(*a),
        }
    }

    /// The five Conv2D+Bias+ReLU ResNet groups used as benchmarks.
    pub fn resnet_conv2d_groups() -> Vec<KernelGroup> {
        // N, H, W, CO, CI, KH, KW, stride, pad
        const ROWS: [(i64, i64, i64, i64, i64, i64, i64, i64, i64); 5] = [
            (1, 224, 224, 64, 3, 7, 7, 2, 3),
            (1, 56, 56, 64, 64, 3, 3, 1, 1),
            (1, 56, 56, 128, 64, 3, 3, 2, 1),
            (1, 28, 28, 256, 128, 3, 3, 2, 1),
            (1, 14, 24, 512, 256, 3, 3, 2, 1),
        ];
        ROWS.iter()
            .enumerate()
            .map(|(id, &(n, h, w, co, ci, kh, kw, s, p))| {
                let mut params = IndexMap::new();
                params.insert("N".to_string(), ParamValue::Int(n));
                params.insert("H".to_string(), ParamValue::Int(h));
                params.insert("W".to_string(), ParamValue::Int(w));
                params.insert("CO".to_string(), ParamValue::Int(co));
                params.insert("CI".to_string(), ParamValue::Int(ci));
                params.insert("KH".to_string(), ParamValue::Int(kh));
                params.insert("KW".to_string(), ParamValue::Int(kw));
                params.insert("stride".to_string(), ParamValue::Pair([s, s]));
                params.insert("pad".to_string(), ParamValue::Pair([p, p]));
                KernelGroup {
                    kernel_type: "conv2d_bias_relu".to_string(),
                    group_id: id as u32,
                    params,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounterSet {
    pub read_accesses: u64,
    pub read_hits: u64,
    pub read_misses: u64,
    pub read_replacements: u64,
    pub write_accesses: u64,
    pub write_hits: u64,
    pub write_misses: u64,
    pub write_replacements: u64,
}

impl CacheCounterSet {
    /// Human-readable descriptions of violated hit/miss/access identities.
    pub fn consistency_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.read_hits + self.read_misses != self.read_accesses {
            out.push(format!(
                "read hits {} + misses {} != accesses {}",
                self.read_hits, self.read_misses, self.read_accesses
            ));
        }
        if self.write_hits + self.write_misses != self.write_accesses {
            out.push(format!(
                "write hits {} + misses {} != accesses {}",
                self.write_hits, self.write_misses, self.write_accesses
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatVector {
    pub total_instructions: u64,
    pub loads: u64,
    pub stores: u64,
    pub branches: u64,
    pub per_cache: BTreeMap<String, CacheCounterSet>,
}

impl StatVector {
    pub fn validate(&self, topology: &CacheTopology) -> Result<()> {
        if self.total_instructions == 0 {
            return Err(Error::EmptyExecution);
        }
        if self.loads + self.stores > self.total_instructions {
            return Err(Error::invalid(format!(
                "loads {} + stores {} exceed {} instructions",
                self.loads, self.stores, self.total_instructions
            )));
        }
        if self.branches > self.total_instructions {
            return Err(Error::invalid(format!(
                "branches {} exceed {} instructions",
                self.branches, self.total_instructions
            )));
        }
        for name in self.per_cache.keys() {
            if !topology.levels.iter().any(|l| &l.name == name) {
                return Err(Error::invalid(format!("cache {name} is not in the topology")));
            }
        }
        Ok(())
    }

    pub fn cache(&self, name: &str) -> CacheCounterSet {
        self.per_cache.get(name).copied().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplementationRecord {
    pub group: GroupKey,
    pub impl_id: u64,
    pub stats: StatVector,
    pub runtime_samples: Vec<f64>,
    pub reference_runtime: f64,
}

impl ImplementationRecord {
    pub fn new(group: GroupKey, impl_id: u64, stats: StatVector, runtime_samples: Vec<f64>) -> Result<Self> {
        if runtime_samples.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::invalid("runtime samples must be positive and finite"));
        }
        let reference_runtime = median(&runtime_samples)?;
        Ok(Self {
            group,
            impl_id,
            stats,
            runtime_samples,
            reference_runtime,
        })
    }

    fn check_reference(&self) -> Result<()> {
        let expected = median(&self.runtime_samples)?;
        if expected != self.reference_runtime {
            return Err(Error::invalid(format!(
                "record {}/{}: reference_runtime {} is not the sample median {}",
                self.group, self.impl_id, self.reference_runtime, expected
            )));
        }
        Ok(())
    }
}

/// Median with the even-length case resolved as the mean of the two central values.
pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub topology: CacheTopology,
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Width of the raw (and of the normalized) block.
    pub fn raw_len(&self) -> usize {
        MIX_FEATURES + CACHE_FEATURES * self.topology.levels.len()
    }

    /// Hex SHA-256 over the newline-joined feature names.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for name in &self.names {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Fixed feature ordering: instruction mix, per-level cache ratios in
/// topology order, the group-normalized copy of that block, then the
/// group-relative instruction count.
pub fn feature_schema(topology: &CacheTopology) -> FeatureSchema {
    let mut raw: Vec<String> = MIX_NAMES.iter().map(|s| s.to_string()).collect();
    for level in &topology.levels {
        for ratio in CACHE_RATIO_NAMES {
            raw.push(format!("{}.{}", level.name, ratio));
        }
    }
    let mut names = raw.clone();
    names.extend(raw.iter().map(|n| format!("norm.{n}")));
    names.push(INST_REL_NAME.to_string());
    FeatureSchema {
        topology: topology.clone(),
        names,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub topology: CacheTopology,
    pub groups: Vec<KernelGroup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<ImplementationRecord>,
}

impl Dataset {
    pub fn new(topology: CacheTopology, groups: Vec<KernelGroup>, records: Vec<ImplementationRecord>) -> Result<Self> {
        let ds = Self {
            header: DatasetHeader {
                format_version: DATASET_FORMAT_VERSION,
                topology,
                groups,
            },
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn topology(&self) -> &CacheTopology {
        &self.header.topology
    }

    pub fn group_keys(&self) -> Vec<GroupKey> {
        self.header.groups.iter().map(KernelGroup::key).collect()
    }

    pub fn group(&self, key: &GroupKey) -> Option<&KernelGroup> {
        self.header.groups.iter().find(|g| &g.key() == key)
    }

    /// Records of one group, in dataset order.
    pub fn records_of<'a>(&'a self, key: &'a GroupKey) -> impl Iterator<Item = &'a ImplementationRecord> + 'a {
        self.records.iter().filter(move |r| &r.group == key)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                expected: DATASET_FORMAT_VERSION,
                found: self.header.format_version,
            });
        }
        self.header.topology.validate()?;
        let mut keys = HashSet::new();
        for g in &self.header.groups {
            if !keys.insert(g.key()) {
                return Err(Error::invalid(format!("duplicate group {}", g.key())));
            }
        }
        for r in &self.records {
            if !keys.contains(&r.group) {
                return Err(Error::UnknownGroup(r.group.to_string()));
            }
            r.check_reference()?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(Error::invalid("dataset is empty")),
            }
        };
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let ds = Self { header, records };
        ds.validate()?;
        Ok(ds)
    }
}
