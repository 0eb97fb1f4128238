//! Ranking-quality metrics over prediction-ordered runtimes, and the
//! parallel-simulator break-even count.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GroupKey;

/// Measured runtimes reordered by ascending predicted score.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOrder {
    /// Original indices in predicted order.
    pub indices: Vec<usize>,
    /// `t_pred`: runtimes in predicted order.
    pub runtimes: Vec<f64>,
}

fn check_positive(values: &[f64]) -> Result<()> {
    if values.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::invalid("runtimes must be positive and finite"));
    }
    Ok(())
}

/// Stable sort of `runtimes` by `scores`; equal scores keep input order.
pub fn prediction_order(scores: &[f64], runtimes: &[f64]) -> Result<PredictionOrder> {
    if scores.len() != runtimes.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: runtimes.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::invalid("nothing to order"));
    }
    let mut indices: Vec<usize> = (0..scores.len()).collect();
    indices.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let runtimes = indices.iter().map(|&i| runtimes[i]).collect();
    Ok(PredictionOrder { indices, runtimes })
}

pub fn sorted_reference(runtimes: &[f64]) -> Vec<f64> {
    let mut v = runtimes.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Percent regret of the top-predicted implementation.
pub fn e_top1(t_pred: &[f64], t_ref_sorted: &[f64]) -> Result<f64> {
    if t_pred.is_empty() || t_ref_sorted.is_empty() {
        return Err(Error::invalid("empty runtime sequence"));
    }
    check_positive(t_pred)?;
    check_positive(t_ref_sorted)?;
    Ok((1.0 - t_ref_sorted[0] / t_pred[0]) * 100.0)
}

/// Percentile position of the fastest runtime in `t_pred`, found by value.
pub fn r_top1(t_pred: &[f64], t_ref_sorted: &[f64]) -> Result<f64> {
    if t_pred.is_empty() || t_ref_sorted.is_empty() {
        return Err(Error::invalid("empty runtime sequence"));
    }
    check_positive(t_pred)?;
    check_positive(t_ref_sorted)?;
    let pos = t_pred
        .iter()
        .position(|&t| t == t_ref_sorted[0])
        .ok_or_else(|| Error::invalid("fastest runtime is absent from the predicted order"))?;
    Ok((pos + 1) as f64 * 100.0 / t_ref_sorted.len() as f64)
}

/// Like [`r_top1`], but tracks the identity of the fastest implementation
/// (lowest index among equal minima) instead of comparing runtimes.
pub fn r_top1_by_identity(order: &PredictionOrder, runtimes: &[f64]) -> Result<f64> {
    if runtimes.len() != order.indices.len() {
        return Err(Error::LengthMismatch {
            left: order.indices.len(),
            right: runtimes.len(),
        });
    }
    check_positive(runtimes)?;
    let fastest = (0..runtimes.len())
        .min_by(|&a, &b| runtimes[a].total_cmp(&runtimes[b]).then(a.cmp(&b)))
        .ok_or_else(|| Error::invalid("empty runtime sequence"))?;
    let pos = order
        .indices
        .iter()
        .position(|&i| i == fastest)
        .ok_or_else(|| Error::invalid("fastest implementation is absent from the predicted order"))?;
    Ok((pos + 1) as f64 * 100.0 / runtimes.len() as f64)
}

/// Averaged relative drop over consecutive pairs that decrease.
pub fn quality_score(seq: &[f64]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::invalid("quality score needs at least two runtimes"));
    }
    check_positive(seq)?;
    let penalty: f64 = seq.windows(2).map(|w| (w[0] - w[0].min(w[1])) / w[0]).sum();
    Ok(penalty * 100.0 / seq.len() as f64)
}

/// Quality score of the first and second half of the predicted order,
/// split at `floor(n/2)`; the pair straddling the split is not scored.
pub fn q_split(t_pred: &[f64]) -> Result<(f64, f64)> {
    if t_pred.len() < 4 {
        return Err(Error::invalid("Q split needs at least four runtimes"));
    }
    let (low, high) = t_pred.split_at(t_pred.len() / 2);
    Ok((quality_score(low)?, quality_score(high)?))
}

/// Number of parallel simulators needed to beat sequential native runs
/// with cooldowns and repetitions.
pub fn parallel_break_even(t_simulator: f64, t_cooldown: f64, t_ref: f64, n_exe: u32) -> Result<u64> {
    if [t_simulator, t_cooldown, t_ref]
        .iter()
        .any(|&v| !(v > 0.0) || !v.is_finite())
        || n_exe == 0
    {
        return Err(Error::invalid("break-even inputs must be positive and finite"));
    }
    let k = (t_simulator / ((t_cooldown + t_ref) * n_exe as f64)).ceil();
    if k > u64::MAX as f64 {
        return Err(Error::invalid("break-even count overflows"));
    }
    Ok((k as u64).max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub group: GroupKey,
    pub predictor: String,
    pub e_top1: f64,
    pub r_top1: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub n: usize,
}

impl RankingReport {
    pub fn from_scores(group: GroupKey, predictor: &str, scores: &[f64], runtimes: &[f64]) -> Result<Self> {
        let order = prediction_order(scores, runtimes)?;
        let reference = sorted_reference(runtimes);
        let (q_low, q_high) = q_split(&order.runtimes)?;
        Ok(Self {
            group,
            predictor: predictor.to_string(),
            e_top1: e_top1(&order.runtimes, &reference)?,
            r_top1: r_top1_by_identity(&order, runtimes)?,
            q_low,
            q_high,
            n: runtimes.len(),
        })
    }
}

fn predictors_in_order(reports: &[RankingReport]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        if !names.contains(&r.predictor) {
            names.push(r.predictor.clone());
        }
    }
    names
}

fn groups_in_order(reports: &[RankingReport]) -> Vec<GroupKey> {
    let mut keys: Vec<GroupKey> = reports.iter().map(|r| r.group.clone()).collect();
    keys.sort();
    keys.dedup();
    keys
}

/// One row per group, four columns (E_top1, Q_low, Q_high, R_top1) per predictor.
pub fn write_reports_csv<W: Write>(reports: &[RankingReport], out: W) -> Result<()> {
    let predictors = predictors_in_order(reports);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["kernel_type".to_string(), "group".to_string()];
    for p in &predictors {
        for m in ["E_top1", "Q_low", "Q_high", "R_top1"] {
            header.push(format!("{p}.{m}"));
        }
    }
    w.write_record(&header)?;
    for g in groups_in_order(reports) {
        let mut row = vec![g.kernel_type.clone(), g.group_id.to_string()];
        for p in &predictors {
            match reports.iter().find(|r| r.group == g && &r.predictor == p) {
                Some(r) => row.extend(
                    [r.e_top1, r.q_low, r.q_high, r.r_top1]
                        .iter()
                        .map(|v| format!("{v:.4}")),
                ),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text rendering in the same layout as the CSV.
pub fn render_reports_table(reports: &[RankingReport]) -> String {
    let predictors = predictors_in_order(reports);
    let mut out = String::new();
    let _ = write!(out, "{:>4} |", "ID");
    for p in &predictors {
        let _ = write!(out, " {:^31} |", p);
    }
    out.push('\n');
    let _ = write!(out, "{:>4} |", "");
    for _ in &predictors {
        let _ = write!(out, " {:>7}{:>8}{:>8}{:>8} |", "E_top1", "Q_low", "Q_high", "R_top1");
    }
    out.push('\n');
    for g in groups_in_order(reports) {
        let _ = write!(out, "{:>4} |", g.group_id);
        for p in &predictors {
            match reports.iter().find(|r| r.group == g && &r.predictor == p) {
                Some(r) => {
                    let _ = write!(
                        out,
                        " {:>7.2}{:>8.2}{:>8.2}{:>8.2} |",
                        r.e_top1, r.q_low, r.q_high, r.r_top1
                    );
                }
                None => {
                    let _ = write!(out, " {:>31} |", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
