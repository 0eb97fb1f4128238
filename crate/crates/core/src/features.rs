//! Ratio features, group normalization, training targets and the
//! inference-time mean windows.

use std::io::Write;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CacheTopology, FeatureSchema, GroupKey, ImplementationRecord, StatVector};

/// Default static window: one autotuner measurement batch.
pub const DEFAULT_STATIC_WINDOW: usize = 64;

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Instruction mix followed by six hit/miss/replacement ratios per cache level.
pub fn raw_features(stats: &StatVector, topology: &CacheTopology) -> Vec<f64> {
    let total = stats.total_instructions;
    let mut out = Vec::with_capacity(3 + 6 * topology.levels.len());
    out.push(ratio(stats.loads, total));
    out.push(ratio(stats.stores, total));
    out.push(ratio(stats.branches, total));
    for level in &topology.levels {
        let c = stats.cache(&level.name);
        out.push(ratio(c.read_hits, c.read_accesses));
        out.push(ratio(c.read_misses, c.read_accesses));
        out.push(ratio(c.read_replacements, c.read_accesses));
        out.push(ratio(c.write_hits, c.write_accesses));
        out.push(ratio(c.write_misses, c.write_accesses));
        out.push(ratio(c.write_replacements, c.write_accesses));
    }
    out
}

#[inline]
fn relative_to(value: f64, mean: f64) -> f64 {
    if mean == 0.0 {
        0.0
    } else {
        (value - mean) / mean
    }
}

/// `(P - mean) / mean` entry-wise; a zero mean yields 0.
pub fn normalize_to_group(raw: &[f64], means: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != means.len() {
        return Err(Error::LengthMismatch {
            left: raw.len(),
            right: means.len(),
        });
    }
    Ok(raw.iter().zip(means).map(|(&p, &m)| relative_to(p, m)).collect())
}

/// Running sums in arrival order. Exact summaries and windows share this
/// so that equal sample sequences give bitwise-equal means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAccumulator {
    sums: Vec<f64>,
    instruction_sum: f64,
    count: usize,
}

impl MeanAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            sums: vec![0.0; width],
            instruction_sum: 0.0,
            count: 0,
        }
    }

    pub fn add(&mut self, sample: &WindowSample) -> Result<()> {
        if sample.raw.len() != self.sums.len() {
            return Err(Error::LengthMismatch {
                left: sample.raw.len(),
                right: self.sums.len(),
            });
        }
        for (s, v) in self.sums.iter_mut().zip(&sample.raw) {
            *s += v;
        }
        self.instruction_sum += sample.instructions;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn means(&self) -> Result<GroupMeans> {
        if self.count == 0 {
            return Err(Error::Window("no samples observed yet".into()));
        }
        let n = self.count as f64;
        Ok(GroupMeans {
            raw: self.sums.iter().map(|s| s / n).collect(),
            instructions: self.instruction_sum / n,
        })
    }
}

/// Means needed to normalize one implementation against its group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub raw: Vec<f64>,
    pub instructions: f64,
}

pub trait MeanSource {
    fn group_means(&self) -> Result<GroupMeans>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: GroupKey,
    pub raw_means: Vec<f64>,
    pub mean_instructions: f64,
    pub mean_reference_runtime: f64,
    pub sample_count: usize,
}

impl GroupSummary {
    /// Exact group means over `records` (all assumed to be from `group`).
    pub fn from_records<'a, I>(group: GroupKey, records: I, topology: &CacheTopology) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ImplementationRecord>,
    {
        let width = 3 + 6 * topology.levels.len();
        let mut acc = MeanAccumulator::new(width);
        let mut runtime_sum = 0.0;
        for r in records {
            acc.add(&WindowSample::from_stats(&r.stats, topology))?;
            runtime_sum += r.reference_runtime;
        }
        let means = acc.means().map_err(|_| Error::NoSamples)?;
        let zero: Vec<usize> = (0..width).filter(|&i| means.raw[i] == 0.0).collect();
        if !zero.is_empty() {
            warn!("group {group}: features {zero:?} have zero mean, normalized to 0");
        }
        Ok(Self {
            group,
            mean_reference_runtime: runtime_sum / acc.count() as f64,
            sample_count: acc.count(),
            raw_means: means.raw,
            mean_instructions: means.instructions,
        })
    }
}

impl MeanSource for GroupSummary {
    fn group_means(&self) -> Result<GroupMeans> {
        Ok(GroupMeans {
            raw: self.raw_means.clone(),
            instructions: self.mean_instructions,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub raw: Vec<f64>,
    pub instructions: f64,
}

impl WindowSample {
    pub fn from_stats(stats: &StatVector, topology: &CacheTopology) -> Self {
        Self {
            raw: raw_features(stats, topology),
            instructions: stats.total_instructions as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum WindowMode {
    Exact,
    Static { size: usize },
    Dynamic,
}

/// Source of group means at inference time, when a group's full set of
/// implementations is not known up front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WindowState {
    /// Precomputed means; updates are rejected.
    Exact(GroupSummary),
    /// Means of the first `size` samples, frozen afterwards.
    Static {
        size: usize,
        acc: MeanAccumulator,
        frozen: bool,
    },
    /// Running mean of every sample seen.
    Dynamic { acc: MeanAccumulator },
}

impl WindowState {
    pub fn exact(summary: GroupSummary) -> Self {
        WindowState::Exact(summary)
    }

    pub fn new_static(size: usize, topology: &CacheTopology) -> Result<Self> {
        if size == 0 {
            return Err(Error::Window("static window size must be positive".into()));
        }
        Ok(WindowState::Static {
            size,
            acc: MeanAccumulator::new(3 + 6 * topology.levels.len()),
            frozen: false,
        })
    }

    pub fn new_dynamic(topology: &CacheTopology) -> Self {
        WindowState::Dynamic {
            acc: MeanAccumulator::new(3 + 6 * topology.levels.len()),
        }
    }

    /// Build an empty static/dynamic window; exact mode needs a summary.
    pub fn from_mode(mode: WindowMode, topology: &CacheTopology) -> Result<Self> {
        match mode {
            WindowMode::Static { size } => Self::new_static(size, topology),
            WindowMode::Dynamic => Ok(Self::new_dynamic(topology)),
            WindowMode::Exact => Err(Error::Window("exact mode requires precomputed group means".into())),
        }
    }

    pub fn mode(&self) -> WindowMode {
        match self {
            WindowState::Exact(_) => WindowMode::Exact,
            WindowState::Static { size, .. } => WindowMode::Static { size: *size },
            WindowState::Dynamic { .. } => WindowMode::Dynamic,
        }
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            WindowState::Exact(_) => true,
            WindowState::Static { frozen, .. } => *frozen,
            WindowState::Dynamic { .. } => false,
        }
    }

    pub fn observed(&self) -> usize {
        match self {
            WindowState::Exact(s) => s.sample_count,
            WindowState::Static { acc, .. } | WindowState::Dynamic { acc } => acc.count(),
        }
    }

    pub fn update(&mut self, batch: &[WindowSample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Window("empty batch".into()));
        }
        match self {
            WindowState::Exact(_) => Err(Error::Window("exact-mode means cannot be updated".into())),
            WindowState::Static { size, acc, frozen } => {
                for sample in batch {
                    if *frozen {
                        break;
                    }
                    acc.add(sample)?;
                    *frozen = acc.count() >= *size;
                }
                Ok(())
            }
            WindowState::Dynamic { acc } => {
                for sample in batch {
                    acc.add(sample)?;
                }
                Ok(())
            }
        }
    }
}

impl MeanSource for WindowState {
    fn group_means(&self) -> Result<GroupMeans> {
        match self {
            WindowState::Exact(s) => s.group_means(),
            WindowState::Static { acc, .. } | WindowState::Dynamic { acc } => acc.means(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub fingerprint: String,
}

/// `[raw | normalized raw | instruction count relative to the group mean]`.
pub fn assemble_feature_vector(
    stats: &StatVector,
    means: &dyn MeanSource,
    schema: &FeatureSchema,
) -> Result<FeatureVector> {
    let means = means.group_means()?;
    assemble_with_means(stats, &means, schema)
}

/// Same as [`assemble_feature_vector`] with the means already resolved.
pub fn assemble_with_means(stats: &StatVector, means: &GroupMeans, schema: &FeatureSchema) -> Result<FeatureVector> {
    let raw_len = schema.raw_len();
    if means.raw.len() != raw_len || schema.len() != 2 * raw_len + 1 {
        return Err(Error::SchemaMismatch {
            expected: format!("{} raw features", raw_len),
            found: format!("{} group means", means.raw.len()),
        });
    }
    if let Some(unknown) = stats
        .per_cache
        .keys()
        .find(|k| !schema.topology.levels.iter().any(|l| &&l.name == k))
    {
        return Err(Error::SchemaMismatch {
            expected: format!("caches of {}", schema.topology.architecture),
            found: format!("cache {unknown}"),
        });
    }
    let raw = raw_features(stats, &schema.topology);
    let mut values = Vec::with_capacity(schema.len());
    values.extend_from_slice(&raw);
    values.extend(normalize_to_group(&raw, &means.raw)?);
    values.push(relative_to(stats.total_instructions as f64, means.instructions));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    Ok(FeatureVector {
        values,
        fingerprint: schema.fingerprint(),
    })
}

/// Group-normalized measured runtime used as the training target.
pub fn target_score(record: &ImplementationRecord, summary: &GroupSummary) -> Result<f64> {
    let mean = summary.mean_reference_runtime;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::invalid(format!(
            "group mean runtime must be positive, got {mean}"
        )));
    }
    Ok((record.reference_runtime - mean) / mean)
}

/// Row-major feature rows tagged with the schema they were built against.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub fingerprint: String,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn from_vectors(schema: &FeatureSchema, rows: &[FeatureVector]) -> Result<Self> {
        let fingerprint = schema.fingerprint();
        let width = schema.len();
        let mut values = Array2::zeros((rows.len(), width));
        for (i, row) in rows.iter().enumerate() {
            if row.fingerprint != fingerprint || row.values.len() != width {
                return Err(Error::SchemaMismatch {
                    expected: fingerprint,
                    found: row.fingerprint.clone(),
                });
            }
            values.row_mut(i).assign(&ndarray::ArrayView1::from(&row.values));
        }
        Ok(Self { fingerprint, values })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            fingerprint: self.fingerprint.clone(),
            values: self.values.select(ndarray::Axis(0), rows),
        }
    }

    /// CSV with the schema's feature names as header row.
    pub fn write_csv<W: Write>(&self, schema: &FeatureSchema, out: W) -> Result<()> {
        if schema.fingerprint() != self.fingerprint {
            return Err(Error::SchemaMismatch {
                expected: schema.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&schema.names)?;
        for row in self.values.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{feature_schema, CacheCounterSet, CacheLevelSpec};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn one_level() -> CacheTopology {
        CacheTopology::new("t", vec![CacheLevelSpec::new("L1D", 4096, 8, 8)]).unwrap()
    }

    fn stats(total: u64, loads: u64, c: CacheCounterSet) -> StatVector {
        let mut per_cache = BTreeMap::new();
        per_cache.insert("L1D".to_string(), c);
        StatVector {
            total_instructions: total,
            loads,
            stores: total / 10,
            branches: total / 20,
            per_cache,
        }
    }

    #[test]
    fn write_hit_ratio() {
        let c = CacheCounterSet {
            write_accesses: 100,
            write_hits: 75,
            write_misses: 25,
            ..Default::default()
        };
        let f = raw_features(&stats(1000, 300, c), &one_level());
        assert_eq!(f.len(), 9);
        assert_eq!(f[0], 0.3);
        assert_eq!(f[6], 0.75);
        assert_eq!(f[7], 0.25);
    }

    #[test]
    fn zero_denominators_give_zero() {
        let c = CacheCounterSet {
            read_accesses: 10,
            read_hits: 10,
            ..Default::default()
        };
        let mut s = stats(1000, 0, c);
        s.stores = 0;
        s.branches = 0;
        let f = raw_features(&s, &one_level());
        assert_eq!(&f[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&f[6..], &[0.0, 0.0, 0.0]);
        assert_eq!(f[3], 1.0);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_to_group(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(),
            vec![-0.5, 0.0, 0.5]
        );
        assert_eq!(normalize_to_group(&[4.0, 5.0], &[4.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(normalize_to_group(&[7.0], &[0.0]).unwrap(), vec![0.0]);
        assert!(normalize_to_group(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn record(total: u64, runtime: f64) -> ImplementationRecord {
        let c = CacheCounterSet {
            read_accesses: 100,
            read_hits: 90,
            read_misses: 10,
            read_replacements: 3,
            write_accesses: 40,
            write_hits: 30,
            write_misses: 10,
            write_replacements: 2,
        };
        ImplementationRecord::new(GroupKey::new("k", 0), total, stats(total, total / 3, c), vec![runtime]).unwrap()
    }

    #[test]
    fn assembled_length_and_zero_blocks_at_mean() {
        let topo = CacheTopology::arm();
        let schema = feature_schema(&topo);
        let mut s = stats(1000, 300, CacheCounterSet::default());
        s.per_cache.clear();
        let rec = ImplementationRecord::new(GroupKey::new("k", 0), 0, s, vec![1.0]).unwrap();
        let summary = GroupSummary::from_records(rec.group.clone(), [&rec], &topo).unwrap();
        let v = assemble_feature_vector(&rec.stats, &summary, &schema).unwrap();
        assert_eq!(v.values.len(), 43);
        assert!(v.values[21..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn assemble_rejects_foreign_schema() {
        let topo = one_level();
        let rec = record(1000, 1.0);
        let summary = GroupSummary::from_records(rec.group.clone(), [&rec], &topo).unwrap();
        let other = feature_schema(&CacheTopology::x86());
        assert!(matches!(
            assemble_feature_vector(&rec.stats, &summary, &other),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn instruction_feature_is_relative_to_group_mean() {
        let topo = one_level();
        let recs = [record(1000, 1.0), record(3000, 1.0)];
        let summary = GroupSummary::from_records(GroupKey::new("k", 0), &recs, &topo).unwrap();
        let schema = feature_schema(&topo);
        let v = assemble_feature_vector(&recs[1].stats, &summary, &schema).unwrap();
        assert_eq!(*v.values.last().unwrap(), 0.5);
    }

    #[test]
    fn target_score_examples() {
        let topo = one_level();
        let recs = [record(1000, 1.5), record(1000, 0.5)];
        let summary = GroupSummary::from_records(GroupKey::new("k", 0), &recs, &topo).unwrap();
        assert_eq!(summary.mean_reference_runtime, 1.0);
        assert_eq!(target_score(&recs[0], &summary).unwrap(), 0.5);
        assert_eq!(target_score(&recs[1], &summary).unwrap(), -0.5);
        let mut bad = summary.clone();
        bad.mean_reference_runtime = 0.0;
        assert!(target_score(&recs[0], &bad).is_err());
        let at_mean = record(1000, 1.0);
        assert_eq!(target_score(&at_mean, &summary).unwrap(), 0.0);
    }

    fn sample(v: f64) -> WindowSample {
        WindowSample {
            raw: vec![v; 9],
            instructions: v,
        }
    }

    #[test]
    fn static_window_freezes() {
        let topo = one_level();
        let mut w = WindowState::new_static(2, &topo).unwrap();
        assert!(w.group_means().is_err());
        w.update(&[sample(1.0)]).unwrap();
        assert!(!w.is_frozen());
        w.update(&[sample(3.0)]).unwrap();
        assert!(w.is_frozen());
        let frozen = w.group_means().unwrap();
        w.update(&vec![sample(100.0); 5]).unwrap();
        assert_eq!(w.group_means().unwrap(), frozen);
        assert_eq!(frozen.instructions, 2.0);
    }

    #[test]
    fn static_window_takes_prefix_of_overshooting_batch() {
        let topo = one_level();
        let mut w = WindowState::new_static(3, &topo).unwrap();
        w.update(&[sample(1.0), sample(2.0), sample(3.0), sample(50.0)])
            .unwrap();
        assert_eq!(w.group_means().unwrap().instructions, 2.0);
        assert_eq!(w.observed(), 3);
    }

    #[test]
    fn dynamic_window_running_mean() {
        let topo = one_level();
        let mut w = WindowState::new_dynamic(&topo);
        w.update(&[sample(1.0)]).unwrap();
        w.update(&[sample(3.0)]).unwrap();
        assert_eq!(w.group_means().unwrap().raw[0], 2.0);
    }

    #[test]
    fn exact_window_rejects_updates() {
        let topo = one_level();
        let rec = record(1000, 1.0);
        let summary = GroupSummary::from_records(rec.group.clone(), [&rec], &topo).unwrap();
        let mut w = WindowState::exact(summary);
        assert!(w.update(&[sample(1.0)]).is_err());
        assert!(WindowState::new_static(0, &topo).is_err());
        let mut d = WindowState::new_dynamic(&topo);
        assert!(d.update(&[]).is_err());
    }

    #[test]
    fn full_static_window_is_bitwise_exact() {
        let topo = one_level();
        let schema = feature_schema(&topo);
        let recs: Vec<_> = (1..=7).map(|i| record(1000 * i + 17 * i * i, 0.1 * i as f64)).collect();
        let summary = GroupSummary::from_records(GroupKey::new("k", 0), &recs, &topo).unwrap();
        let mut w = WindowState::new_static(recs.len(), &topo).unwrap();
        let samples: Vec<_> = recs.iter().map(|r| WindowSample::from_stats(&r.stats, &topo)).collect();
        w.update(&samples[..3]).unwrap();
        w.update(&samples[3..]).unwrap();
        for r in &recs {
            let a = assemble_feature_vector(&r.stats, &summary, &schema).unwrap();
            let b = assemble_feature_vector(&r.stats, &w, &schema).unwrap();
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn feature_csv_has_header() {
        let topo = one_level();
        let schema = feature_schema(&topo);
        let rec = record(1000, 1.0);
        let summary = GroupSummary::from_records(rec.group.clone(), [&rec], &topo).unwrap();
        let v = assemble_feature_vector(&rec.stats, &summary, &schema).unwrap();
        let m = FeatureMatrix::from_vectors(&schema, &[v]).unwrap();
        let mut out = Vec::new();
        m.write_csv(&schema, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("load_frac,store_frac,branch_frac,L1D.rd_hit_ratio"));
        assert_eq!(text.lines().count(), 2);
    }

    proptest! {
        #[test]
        fn consistent_counters_give_unit_interval_ratios(
            rd in 0u64..10_000, rd_hit_frac in 0.0f64..=1.0, repl_frac in 0.0f64..=1.0,
            wr in 0u64..10_000, wr_hit_frac in 0.0f64..=1.0,
            total in 1u64..100_000, loads_frac in 0.0f64..=0.5, stores_frac in 0.0f64..=0.5,
        ) {
            let rh = (rd as f64 * rd_hit_frac) as u64;
            let wh = (wr as f64 * wr_hit_frac) as u64;
            let c = CacheCounterSet {
                read_accesses: rd, read_hits: rh, read_misses: rd - rh,
                read_replacements: ((rd - rh) as f64 * repl_frac) as u64,
                write_accesses: wr, write_hits: wh, write_misses: wr - wh,
                write_replacements: ((wr - wh) as f64 * repl_frac) as u64,
            };
            let mut s = stats(total, (total as f64 * loads_frac) as u64, c);
            s.stores = (total as f64 * stores_frac) as u64;
            for f in raw_features(&s, &one_level()) {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }

        #[test]
        fn appending_mean_samples_keeps_means(vals in prop::collection::vec(0.0f64..10.0, 1..20)) {
            let topo = one_level();
            let mut w = WindowState::new_dynamic(&topo);
            let batch: Vec<_> = vals.iter().map(|&v| sample(v)).collect();
            w.update(&batch).unwrap();
            let before = w.group_means().unwrap();
            w.update(&[WindowSample { raw: before.raw.clone(), instructions: before.instructions }]).unwrap();
            let after = w.group_means().unwrap();
            for (a, b) in before.raw.iter().zip(&after.raw) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
