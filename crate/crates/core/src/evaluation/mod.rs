//! Train/test protocol over a dataset: per-group splits, repeated fits,
//! median predictions, ranking reports, and leave-one-group-out runs.

pub mod synthetic;

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    assemble_with_means, target_score, FeatureMatrix, GroupSummary, MeanSource, WindowMode, WindowSample, WindowState,
};
use crate::hyperopt::{grid_search, tune_gp, BoConfig, GridResult, OptimizeResult, SearchSpace};
use crate::metrics::{prediction_order, sorted_reference, RankingReport};
use crate::model::{feature_schema, median, Dataset, FeatureSchema, GroupKey};
use crate::predictors::{fit_gbt, loss, GbtConfig, LossKind, PredictorConfig, PredictorKind, PredictorModel};

pub use synthetic::{synthesize_dataset, CostCoefficients, ImplParams, ScheduleSpace, SyntheticSpec};

/// Label used for the injected perfect predictor.
pub const PERFECT_LABEL: &str = "Perfect";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub implementations: usize,
    pub test_count: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub predictors: Vec<PredictorConfig>,
    /// Normalization of test features; training always uses exact means.
    pub window: WindowMode,
    #[serde(default)]
    pub include_perfect: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            implementations: 500,
            test_count: 100,
            repetitions: 10,
            seed: 0,
            predictors: PredictorKind::ALL
                .iter()
                .map(|&k| PredictorConfig::default_for(k))
                .collect(),
            window: WindowMode::Exact,
            include_perfect: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.test_count == 0 || self.test_count >= self.implementations {
            return Err(Error::invalid("need 0 < test count < implementation count"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("need at least one repetition"));
        }
        if let WindowMode::Static { size: 0 } = self.window {
            return Err(Error::Window("static window size must be positive".into()));
        }
        Ok(())
    }
}

/// Record indices of one group's implementations, split for training and test.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits, exact group summaries and the feature schema shared by every
/// fit of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared<'a> {
    pub dataset: &'a Dataset,
    pub schema: FeatureSchema,
    pub splits: BTreeMap<GroupKey, GroupSplit>,
    pub summaries: BTreeMap<GroupKey, GroupSummary>,
}

fn group_seed(seed: u64, key: &GroupKey) -> u64 {
    let mut h = seed ^ 0x5851_f42d_4c95_7f2d;
    for b in key.kernel_type.bytes().chain(key.group_id.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(rep as u64 + 1)
}

impl<'a> Prepared<'a> {
    /// Draws `plan.implementations` records per group and splits off
    /// `plan.test_count` of them as the test set.
    pub fn new(dataset: &'a Dataset, plan: &ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let topology = dataset.topology();
        let mut splits = BTreeMap::new();
        let mut summaries = BTreeMap::new();
        for key in dataset.group_keys() {
            let mut idx: Vec<usize> = (0..dataset.records.len())
                .filter(|&i| dataset.records[i].group == key)
                .collect();
            if idx.len() < plan.implementations {
                return Err(Error::invalid(format!(
                    "group {key} has {} implementations, plan needs {}",
                    idx.len(),
                    plan.implementations
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(group_seed(plan.seed, &key));
            idx.shuffle(&mut rng);
            idx.truncate(plan.implementations);
            let test = idx[..plan.test_count].to_vec();
            let train = idx[plan.test_count..].to_vec();
            let summary = GroupSummary::from_records(key.clone(), idx.iter().map(|&i| &dataset.records[i]), topology)?;
            summaries.insert(key.clone(), summary);
            splits.insert(key, GroupSplit { train, test });
        }
        if splits.is_empty() {
            return Err(Error::NoSamples);
        }
        Ok(Self {
            dataset,
            schema: feature_schema(topology),
            splits,
            summaries,
        })
    }

    pub fn groups(&self) -> Vec<GroupKey> {
        self.splits.keys().cloned().collect()
    }

    /// Exact-mean features and targets of the training records of `groups`.
    pub fn training_data(&self, groups: &[GroupKey]) -> Result<(FeatureMatrix, Vec<f64>)> {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for key in groups {
            let split = self
                .splits
                .get(key)
                .ok_or_else(|| Error::UnknownGroup(key.to_string()))?;
            let summary = &self.summaries[key];
            let means = summary.group_means()?;
            for &i in &split.train {
                let r = &self.dataset.records[i];
                rows.push(assemble_with_means(&r.stats, &means, &self.schema)?);
                y.push(target_score(r, summary)?);
            }
        }
        Ok((FeatureMatrix::from_vectors(&self.schema, &rows)?, y))
    }

    /// Test features of `group`, normalized by `mode`. Window modes see the
    /// test set as one batch, in split order.
    pub fn test_data(&self, group: &GroupKey, mode: WindowMode) -> Result<FeatureMatrix> {
        let split = self
            .splits
            .get(group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        let topology = self.dataset.topology();
        let records: Vec<_> = split.test.iter().map(|&i| &self.dataset.records[i]).collect();
        let means = match mode {
            WindowMode::Exact => self.summaries[group].group_means()?,
            _ => {
                let mut window = WindowState::from_mode(mode, topology)?;
                let batch: Vec<WindowSample> = records
                    .iter()
                    .map(|r| WindowSample::from_stats(&r.stats, topology))
                    .collect();
                window.update(&batch)?;
                window.group_means()?
            }
        };
        let rows = records
            .iter()
            .map(|r| assemble_with_means(&r.stats, &means, &self.schema))
            .collect::<Result<Vec<_>>>()?;
        FeatureMatrix::from_vectors(&self.schema, &rows)
    }

    pub fn test_runtimes(&self, group: &GroupKey) -> Vec<f64> {
        self.splits[group]
            .test
            .iter()
            .map(|&i| self.dataset.records[i].reference_runtime)
            .collect()
    }

    /// Group-normalized true runtimes of the test records.
    pub fn test_targets(&self, group: &GroupKey) -> Result<Vec<f64>> {
        let summary = &self.summaries[group];
        self.splits[group]
            .test
            .iter()
            .map(|&i| target_score(&self.dataset.records[i], summary))
            .collect()
    }
}

/// Median-over-repetitions scores of one predictor on one group's test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub group: GroupKey,
    pub predictor: String,
    pub scores: Vec<f64>,
    pub runtimes: Vec<f64>,
}

impl GroupPrediction {
    pub fn report(&self) -> Result<RankingReport> {
        RankingReport::from_scores(self.group.clone(), &self.predictor, &self.scores, &self.runtimes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<RankingReport>,
    pub predictions: Vec<GroupPrediction>,
}

fn is_deterministic(config: &PredictorConfig) -> bool {
    matches!(config, PredictorConfig::Mlr | PredictorConfig::Gp(_))
}

fn elementwise_median(runs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = runs.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| median(&runs.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect()
}

/// Fit `config` on `train_groups` once per repetition and return the median
/// test scores of each of `test_groups`.
fn median_scores(
    prep: &Prepared,
    config: &PredictorConfig,
    train_groups: &[GroupKey],
    tests: &[(GroupKey, FeatureMatrix)],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (x, y) = prep.training_data(train_groups)?;
    let reps = if is_deterministic(config) { 1 } else { repetitions };
    let mut runs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); tests.len()];
    for rep in 0..reps {
        let model = PredictorModel::fit(config, &x, &y, repetition_seed(seed, rep))?;
        for (slot, (_, tx)) in runs.iter_mut().zip(tests) {
            slot.push(model.predict(tx)?);
        }
    }
    runs.iter().map(|r| elementwise_median(r)).collect()
}

/// Per-group ranking reports for every configured predictor, one model per
/// kernel type trained on all of its groups.
pub fn run_experiment(dataset: &Dataset, plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    let prep = Prepared::new(dataset, plan)?;
    let groups = prep.groups();
    let mut kernel_types: Vec<String> = groups.iter().map(|g| g.kernel_type.clone()).collect();
    kernel_types.dedup();
    let mut predictions = Vec::new();
    for kt in &kernel_types {
        let members: Vec<GroupKey> = groups.iter().filter(|g| &g.kernel_type == kt).cloned().collect();
        let tests = members
            .iter()
            .map(|g| Ok((g.clone(), prep.test_data(g, plan.window)?)))
            .collect::<Result<Vec<_>>>()?;
        for config in &plan.predictors {
            log::info!("{kt}: fitting {}", config.kind().label());
            let scores = median_scores(&prep, config, &members, &tests, plan.repetitions, plan.seed)?;
            for (g, s) in members.iter().zip(scores) {
                predictions.push(GroupPrediction {
                    group: g.clone(),
                    predictor: config.kind().label().to_string(),
                    scores: s,
                    runtimes: prep.test_runtimes(g),
                });
            }
        }
        if plan.include_perfect {
            for g in &members {
                predictions.push(GroupPrediction {
                    group: g.clone(),
                    predictor: PERFECT_LABEL.to_string(),
                    scores: prep.test_targets(g)?,
                    runtimes: prep.test_runtimes(g),
                });
            }
        }
    }
    let reports = predictions
        .iter()
        .map(GroupPrediction::report)
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutcome { reports, predictions })
}

/// Held-out and all-groups reports for the same test samples of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct LogoOutcome {
    /// Trained without the held-out group.
    pub held_out: Vec<RankingReport>,
    /// Trained on every group of the kernel type.
    pub included: Vec<RankingReport>,
}

/// Fit each configured predictor without `held_out` and evaluate on its
/// test split. Test features use the plan's window, or a dynamic window if
/// the plan asks for exact means.
pub fn leave_one_group_out(dataset: &Dataset, plan: &ExperimentPlan, held_out: &GroupKey) -> Result<LogoOutcome> {
    if dataset.group(held_out).is_none() {
        return Err(Error::UnknownGroup(held_out.to_string()));
    }
    let prep = Prepared::new(dataset, plan)?;
    let all: Vec<GroupKey> = prep
        .groups()
        .into_iter()
        .filter(|g| g.kernel_type == held_out.kernel_type)
        .collect();
    if all.len() < 2 {
        return Err(Error::invalid("leave-one-group-out needs at least two groups"));
    }
    let others: Vec<GroupKey> = all.iter().filter(|g| *g != held_out).cloned().collect();
    let mode = match plan.window {
        WindowMode::Exact => WindowMode::Dynamic,
        m => m,
    };
    let tests = vec![(held_out.clone(), prep.test_data(held_out, mode)?)];
    let runtimes = prep.test_runtimes(held_out);
    let mut out = LogoOutcome {
        held_out: Vec::new(),
        included: Vec::new(),
    };
    for config in &plan.predictors {
        let label = config.kind().label();
        for (train, slot) in [(&others, &mut out.held_out), (&all, &mut out.included)] {
            let scores = median_scores(&prep, config, train, &tests, plan.repetitions, plan.seed)?.remove(0);
            slot.push(RankingReport::from_scores(held_out.clone(), label, &scores, &runtimes)?);
        }
    }
    Ok(out)
}

/// Columns: predicted rank, sorted measured runtime, runtime in predicted order.
pub fn write_gnuplot<W: Write>(prediction: &GroupPrediction, mut out: W) -> Result<()> {
    let order = prediction_order(&prediction.scores, &prediction.runtimes)?;
    let reference = sorted_reference(&prediction.runtimes);
    writeln!(out, "# {} {}", prediction.group, prediction.predictor)?;
    writeln!(out, "# rank t_ref t_pred")?;
    for (i, (r, p)) in reference.iter().zip(&order.runtimes).enumerate() {
        writeln!(out, "{} {:e} {:e}", i + 1, r, p)?;
    }
    Ok(())
}

/// Exact-mean features and targets for every record, in dataset order.
pub fn dataset_features(dataset: &Dataset) -> Result<(FeatureMatrix, Vec<f64>)> {
    let topology = dataset.topology();
    let schema = feature_schema(topology);
    let mut summaries = BTreeMap::new();
    for key in dataset.group_keys() {
        let s = GroupSummary::from_records(key.clone(), dataset.records_of(&key), topology)?;
        summaries.insert(key, s);
    }
    let mut rows = Vec::with_capacity(dataset.records.len());
    let mut y = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let s: &GroupSummary = &summaries[&r.group];
        rows.push(assemble_with_means(&r.stats, &s.group_means()?, &schema)?);
        y.push(target_score(r, s)?);
    }
    if rows.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok((FeatureMatrix::from_vectors(&schema, &rows)?, y))
}

/// Rows `rows` of `x` as a plain matrix.
pub fn rows_of(x: &FeatureMatrix, rows: &[usize]) -> Array2<f64> {
    x.values.select(ndarray::Axis(0), rows)
}

/// Disjoint tuning subsets of the training rows: every fourth row is a
/// validation candidate, and both sides are thinned to keep GP fits cheap.
pub fn tuning_split(x: &FeatureMatrix, y: &[f64]) -> Result<((Array2<f64>, Vec<f64>), (Array2<f64>, Vec<f64>))> {
    let n = x.nrows();
    let fit: Vec<usize> = (0..n).filter(|i| i % 4 != 0).step_by(3).collect();
    let val: Vec<usize> = (0..n).filter(|i| i % 4 == 0).step_by(2).collect();
    if fit.len() < 2 || val.is_empty() {
        return Err(Error::invalid("too few training rows to tune on"));
    }
    let pick = |rows: &[usize]| (rows_of(x, rows), rows.iter().map(|&i| y[i]).collect::<Vec<_>>());
    Ok((pick(&fit), pick(&val)))
}

/// BO-tuned GP configuration on the training split of `prep`.
pub fn tune_gp_on(
    prep: &Prepared,
    loss: LossKind,
    bo: &BoConfig,
) -> Result<(crate::predictors::GpConfig, OptimizeResult)> {
    let (x, y) = prep.training_data(&prep.groups())?;
    let ((xf, yf), (xv, yv)) = tuning_split(&x, &y)?;
    tune_gp(
        (xf.view(), &yf),
        (xv.view(), &yv),
        loss,
        false,
        &SearchSpace::gp_default(),
        bo,
    )
}

/// Grid-searched GBT configuration on the training split of `prep`,
/// minimizing validation loss. `grid` is `[n_trees, max_depth, learning_rate]`.
pub fn tune_gbt_on(
    prep: &Prepared,
    loss_kind: LossKind,
    grid: &[Vec<f64>],
    seed: u64,
) -> Result<(GbtConfig, GridResult)> {
    if grid.len() != 3 {
        return Err(Error::invalid(
            "GBT grid needs n_trees, max_depth and learning_rate axes",
        ));
    }
    let (x, y) = prep.training_data(&prep.groups())?;
    let ((xf, yf), (xv, yv)) = tuning_split(&x, &y)?;
    let config = |p: &[f64]| GbtConfig {
        n_trees: p[0] as usize,
        max_depth: p[1] as usize,
        learning_rate: p[2],
        ..Default::default()
    };
    let res = grid_search(
        |p| match fit_gbt(xf.view(), &yf, &config(p), seed) {
            Ok(m) => loss(loss_kind, &m.predict(xv.view()), &yv).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        },
        grid,
    )?;
    Ok((config(&res.best_point), res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CacheTopology;

    fn small_dataset(seed: u64) -> Dataset {
        synthesize_dataset(&SyntheticSpec {
            implementations_per_group: 60,
            ..SyntheticSpec::new(seed, CacheTopology::riscv())
        })
        .unwrap()
    }

    fn small_plan() -> ExperimentPlan {
        ExperimentPlan {
            implementations: 60,
            test_count: 20,
            repetitions: 2,
            seed: 4,
            predictors: vec![
                PredictorConfig::Mlr,
                PredictorConfig::Gbt(GbtConfig {
                    n_trees: 20,
                    ..Default::default()
                }),
            ],
            window: WindowMode::Exact,
            include_perfect: true,
        }
    }

    #[test]
    fn plan_validation() {
        assert!(ExperimentPlan {
            test_count: 500,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ExperimentPlan {
            repetitions: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ExperimentPlan::default().validate().is_ok());
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let ds = small_dataset(1);
        let prep = Prepared::new(&ds, &small_plan()).unwrap();
        for (key, s) in &prep.splits {
            assert_eq!((s.train.len(), s.test.len()), (40, 20));
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 60);
            assert!(all.iter().all(|&i| &ds.records[i].group == key));
        }
        let big = ExperimentPlan {
            implementations: 61,
            ..small_plan()
        };
        assert!(Prepared::new(&ds, &big).is_err());
    }

    #[test]
    fn perfect_predictor_identity() {
        let ds = small_dataset(2);
        let out = run_experiment(&ds, &small_plan()).unwrap();
        assert_eq!(out.reports.len(), 5 * 3);
        for r in out.reports.iter().filter(|r| r.predictor == PERFECT_LABEL) {
            assert_eq!(r.e_top1, 0.0);
            assert_eq!((r.q_low, r.q_high), (0.0, 0.0));
            assert_eq!(r.r_top1, 100.0 / 20.0);
        }
    }

    #[test]
    fn experiment_is_reproducible() {
        let ds = small_dataset(3);
        let a = run_experiment(&ds, &small_plan()).unwrap();
        let b = run_experiment(&ds, &small_plan()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_repetition_is_the_prediction() {
        let ds = small_dataset(3);
        let plan = ExperimentPlan {
            repetitions: 1,
            include_perfect: false,
            ..small_plan()
        };
        let out = run_experiment(&ds, &plan).unwrap();
        let prep = Prepared::new(&ds, &plan).unwrap();
        let groups = prep.groups();
        let (x, y) = prep.training_data(&groups).unwrap();
        let model = PredictorModel::fit(&plan.predictors[1], &x, &y, repetition_seed(plan.seed, 0)).unwrap();
        let direct = model
            .predict(&prep.test_data(&groups[0], WindowMode::Exact).unwrap())
            .unwrap();
        let p = out
            .predictions
            .iter()
            .find(|p| p.group == groups[0] && p.predictor == "XGBoost")
            .unwrap();
        assert_eq!(p.scores, direct);
    }

    #[test]
    fn full_static_window_matches_exact_test_means() {
        let ds = small_dataset(5);
        let plan = small_plan();
        let prep = Prepared::new(&ds, &plan).unwrap();
        let g = &prep.groups()[1];
        let dynamic = prep.test_data(g, WindowMode::Dynamic).unwrap();
        let full = prep.test_data(g, WindowMode::Static { size: 20 }).unwrap();
        assert_eq!(dynamic, full);
        let partial = prep.test_data(g, WindowMode::Static { size: 5 }).unwrap();
        assert_ne!(dynamic, partial);
    }

    #[test]
    fn logo_checks_group() {
        let ds = small_dataset(6);
        let plan = ExperimentPlan {
            predictors: vec![PredictorConfig::Mlr],
            ..small_plan()
        };
        assert!(matches!(
            leave_one_group_out(&ds, &plan, &GroupKey::new("conv2d_bias_relu", 9)),
            Err(Error::UnknownGroup(_))
        ));
        let out = leave_one_group_out(&ds, &plan, &GroupKey::new("conv2d_bias_relu", 3)).unwrap();
        assert_eq!((out.held_out.len(), out.included.len()), (1, 1));
        assert_eq!(out.held_out[0].n, 20);
    }

    #[test]
    fn gnuplot_rows() {
        let p = GroupPrediction {
            group: GroupKey::new("k", 1),
            predictor: "X".into(),
            scores: vec![0.2, 0.1, 0.3],
            runtimes: vec![1.0, 3.0, 2.0],
        };
        let mut out = Vec::new();
        write_gnuplot(&p, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows, vec!["1 1e0 3e0", "2 2e0 1e0", "3 3e0 2e0"]);
    }
}
