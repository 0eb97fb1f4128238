//! Bayesian optimization of GP hyperparameters and exhaustive grid search.
//!
//! `bayes_optimize` maximizes; `grid_search` minimizes.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::predictors::gp::{GpPosterior, JITTER_MAX};
use crate::predictors::{fit_gp, loss, GpConfig, GpHyper, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl ParamBounds {
    pub fn new(name: &str, lower: f64, upper: f64, scale: Scale) -> Self {
        Self {
            name: name.to_string(),
            lower,
            upper,
            scale,
        }
    }

    fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        };
        v.clamp(self.lower, self.upper)
    }

    fn to_unit(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => (v - self.lower) / (self.upper - self.lower),
            Scale::Log => (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamBounds>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamBounds>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid("search space has no parameters"));
        }
        for p in &params {
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return Err(Error::invalid(format!("{}: need finite lower < upper", p.name)));
            }
            if p.scale == Scale::Log && !(p.lower > 0.0) {
                return Err(Error::invalid(format!("{}: log scale needs lower > 0", p.name)));
            }
        }
        Ok(Self { params })
    }

    /// `C`, `ℓ` and `σ_n²`, all on log scale.
    pub fn gp_default() -> Self {
        Self {
            params: vec![
                ParamBounds::new("constant", 1e-3, 1e3, Scale::Log),
                ParamBounds::new("length_scale", 1e-2, 1e2, Scale::Log),
                ParamBounds::new("noise", 1e-6, 1.0, Scale::Log),
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && self
                .params
                .iter()
                .zip(point)
                .all(|(p, &v)| v >= p.lower && v <= p.upper)
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.params.iter().zip(u).map(|(p, &v)| p.from_unit(v)).collect()
    }

    pub fn to_unit(&self, point: &[f64]) -> Vec<f64> {
        self.params.iter().zip(point).map(|(p, &v)| p.to_unit(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Acquisition {
    ExpectedImprovement { xi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub point: Vec<f64>,
    /// `-inf` marks a failed evaluation.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub budget: usize,
    pub n_init: usize,
    pub n_candidates: usize,
    pub acquisition: Acquisition,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 30,
            n_init: 5,
            n_candidates: 1024,
            acquisition: Acquisition::ExpectedImprovement { xi: 0.01 },
            seed: 0,
        }
    }
}

/// Observations plus the surrogate's current hyperparameters.
#[derive(Clone, Debug)]
pub struct BoState {
    pub space: SearchSpace,
    pub config: BoConfig,
    pub observed: Vec<TraceEntry>,
    pub surrogate: GpHyper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub best_point: Vec<f64>,
    pub best_objective: f64,
    pub trace: Vec<TraceEntry>,
}

const SURROGATE_LENGTH_SCALES: [f64; 8] = [0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0];
const SURROGATE_NOISE: f64 = 1e-6;
const LOCAL_STARTS: usize = 5;
const LOCAL_STEPS: usize = 32;

fn expected_improvement(mu: f64, var: f64, best: f64, xi: f64) -> f64 {
    let imp = mu - best - xi;
    let sigma = var.sqrt();
    if sigma < 1e-12 {
        return imp.max(0.0);
    }
    let z = imp / sigma;
    let n = StdNormal::standard();
    imp * n.cdf(z) + sigma * n.pdf(z)
}

impl BoState {
    pub fn new(space: SearchSpace, config: BoConfig) -> Result<Self> {
        if config.budget == 0 {
            return Err(Error::invalid("BO budget must be at least 1"));
        }
        Ok(Self {
            space,
            config,
            observed: Vec::new(),
            surrogate: GpHyper::new(1.0, 0.2, SURROGATE_NOISE),
        })
    }

    fn successful(&self) -> impl Iterator<Item = &TraceEntry> {
        self.observed.iter().filter(|e| e.objective.is_finite())
    }

    /// Fit the surrogate on the unit cube with standardized objectives,
    /// picking the length scale by marginal likelihood.
    fn fit_surrogate(&mut self) -> Option<(GpPosterior, f64)> {
        let ok: Vec<&TraceEntry> = self.successful().collect();
        if ok.is_empty() {
            return None;
        }
        let d = self.space.dim();
        let x = Array2::from_shape_fn((ok.len(), d), |(i, j)| self.space.to_unit(&ok[i].point)[j]);
        let raw: Vec<f64> = ok.iter().map(|e| e.objective).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let y: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
        let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut chosen: Option<(GpPosterior, f64)> = None;
        for &ls in &SURROGATE_LENGTH_SCALES {
            let cfg = GpConfig {
                hyper: GpHyper::new(1.0, ls, SURROGATE_NOISE),
                standardize: false,
            };
            if let Ok(post) = GpPosterior::fit(x.view(), &y, &cfg) {
                let lml = post.log_marginal_likelihood();
                if lml.is_finite() && chosen.as_ref().is_none_or(|(_, b)| lml > *b) {
                    chosen = Some((post, lml));
                }
            }
        }
        let (post, _) = chosen?;
        self.surrogate = post.model.hyper;
        Some((post, best))
    }

    /// Next point to evaluate, in parameter space.
    pub fn suggest(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.space.dim();
        let n_ok = self.successful().count();
        let random_unit = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
        if self.observed.len() < self.config.n_init || n_ok == 0 {
            let u = random_unit(rng);
            return self.space.from_unit(&u);
        }
        let Some((post, best)) = self.fit_surrogate() else {
            let u = random_unit(rng);
            return self.space.from_unit(&u);
        };
        let Acquisition::ExpectedImprovement { xi } = self.config.acquisition;
        let score = |cands: &[Vec<f64>]| -> Vec<f64> {
            let x = Array2::from_shape_fn((cands.len(), d), |(i, j)| cands[i][j]);
            let (mu, var) = post.predict_with_variance(x.view());
            mu.iter()
                .zip(&var)
                .map(|(&m, &v)| expected_improvement(m, v, best, xi))
                .collect()
        };
        let cands: Vec<Vec<f64>> = (0..self.config.n_candidates.max(1)).map(|_| random_unit(rng)).collect();
        let ei = score(&cands);
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| ei[b].total_cmp(&ei[a]));
        let mut best_u = cands[order[0]].clone();
        let mut best_ei = ei[order[0]];
        let step = Normal::new(0.0, 1.0).expect("unit normal");
        for &start in order.iter().take(LOCAL_STARTS) {
            let mut cur = cands[start].clone();
            let mut cur_ei = ei[start];
            let mut radius = 0.05;
            for _ in 0..LOCAL_STEPS {
                let trial: Vec<f64> = cur
                    .iter()
                    .map(|&u| (u + radius * step.sample(rng)).clamp(0.0, 1.0))
                    .collect();
                let t_ei = score(std::slice::from_ref(&trial))[0];
                if t_ei > cur_ei {
                    cur = trial;
                    cur_ei = t_ei;
                } else {
                    radius *= 0.8;
                }
            }
            if cur_ei > best_ei {
                best_ei = cur_ei;
                best_u = cur;
            }
        }
        self.space.from_unit(&best_u)
    }

    pub fn observe(&mut self, point: Vec<f64>, objective: f64) {
        let objective = if objective.is_nan() {
            f64::NEG_INFINITY
        } else {
            objective
        };
        self.observed.push(TraceEntry {
            iteration: self.observed.len(),
            point,
            objective,
        });
    }

    pub fn best(&self) -> Option<&TraceEntry> {
        self.successful().fold(None, |acc: Option<&TraceEntry>, e| match acc {
            Some(b) if b.objective >= e.objective => Some(b),
            _ => Some(e),
        })
    }
}

/// Maximize `objective` over `space` within `config.budget` evaluations.
pub fn bayes_optimize<F>(mut objective: F, space: &SearchSpace, config: &BoConfig) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut state = BoState::new(space.clone(), config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.budget {
        let p = state.suggest(&mut rng);
        let v = objective(&p);
        state.observe(p, v);
    }
    let best = state.best().ok_or(Error::AllEvaluationsFailed)?.clone();
    Ok(OptimizeResult {
        best_point: best.point,
        best_objective: best.objective,
        trace: state.observed,
    })
}

pub fn write_trace_csv<W: Write>(trace: &[TraceEntry], names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string()];
    header.extend(names.iter().cloned());
    header.push("objective".into());
    w.write_record(&header)?;
    for e in trace {
        let mut row = vec![e.iteration.to_string()];
        row.extend(e.point.iter().map(|v| v.to_string()));
        row.push(e.objective.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Negated test loss of a GP fitted with `hyper`; `-inf` if the fit fails.
pub fn objective_gp(
    hyper: GpHyper,
    standardize: bool,
    train: (ArrayView2<f64>, &[f64]),
    test: (ArrayView2<f64>, &[f64]),
    loss_kind: LossKind,
) -> f64 {
    let cfg = GpConfig { hyper, standardize };
    match fit_gp(train.0, train.1, &cfg) {
        Ok(m) if m.jitter <= JITTER_MAX => {
            let pred = m.predict(test.0);
            match loss(loss_kind, &pred, test.1) {
                Ok(l) if l.is_finite() => -l,
                _ => f64::NEG_INFINITY,
            }
        }
        _ => f64::NEG_INFINITY,
    }
}

pub fn hyper_from_point(p: &[f64]) -> GpHyper {
    GpHyper::new(p[0], p[1], p[2])
}

/// Tune `(C, ℓ, σ_n²)` by BO against a held-out split.
pub fn tune_gp(
    train: (ArrayView2<f64>, &[f64]),
    test: (ArrayView2<f64>, &[f64]),
    loss_kind: LossKind,
    standardize: bool,
    space: &SearchSpace,
    config: &BoConfig,
) -> Result<(GpConfig, OptimizeResult)> {
    if space.dim() != 3 {
        return Err(Error::invalid("GP search space must have three parameters"));
    }
    let res = bayes_optimize(
        |p| objective_gp(hyper_from_point(p), standardize, train, test, loss_kind),
        space,
        config,
    )?;
    Ok((
        GpConfig {
            hyper: hyper_from_point(&res.best_point),
            standardize,
        },
        res,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best_point: Vec<f64>,
    pub best_objective: f64,
    pub table: Vec<GridRow>,
}

/// Minimize over the Cartesian product of `grid`, last parameter varying
/// fastest. NaN objectives count as worst.
pub fn grid_search<F>(mut objective: F, grid: &[Vec<f64>]) -> Result<GridResult>
where
    F: FnMut(&[f64]) -> f64,
{
    if grid.is_empty() || grid.iter().any(Vec::is_empty) {
        return Err(Error::invalid("grid must have at least one value per parameter"));
    }
    let total: usize = grid.iter().map(Vec::len).product();
    let mut table: Vec<GridRow> = Vec::with_capacity(total);
    let mut idx = vec![0usize; grid.len()];
    let mut best: Option<usize> = None;
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    for cell in 0..total {
        let point: Vec<f64> = idx.iter().zip(grid).map(|(&i, vals)| vals[i]).collect();
        let objective = objective(&point);
        if best.is_none_or(|b: usize| key(objective) < key(table[b].objective)) {
            best = Some(cell);
        }
        table.push(GridRow { point, objective });
        for k in (0..grid.len()).rev() {
            idx[k] += 1;
            if idx[k] < grid[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    let b = &table[best.expect("non-empty grid")];
    Ok(GridResult {
        best_point: b.point.clone(),
        best_objective: b.objective,
        table,
    })
}

pub fn write_grid_csv<W: Write>(table: &[GridRow], names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = names.to_vec();
    header.push("objective".into());
    w.write_record(&header)?;
    for r in table {
        let mut row: Vec<String> = r.point.iter().map(|v| v.to_string()).collect();
        row.push(r.objective.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn parabola() -> SearchSpace {
        SearchSpace::new(vec![ParamBounds::new("x", 0.0, 5.0, Scale::Linear)]).unwrap()
    }

    #[test]
    fn space_validation_and_mapping() {
        assert!(SearchSpace::new(vec![ParamBounds::new("a", 1.0, 1.0, Scale::Linear)]).is_err());
        assert!(SearchSpace::new(vec![ParamBounds::new("a", 0.0, 1.0, Scale::Log)]).is_err());
        let s = SearchSpace::gp_default();
        let mid = s.from_unit(&[0.5, 0.5, 0.5]);
        assert!((mid[0] - 1.0).abs() < 1e-12 && (mid[1] - 1.0).abs() < 1e-12 && (mid[2] - 1e-3).abs() < 1e-15);
        let u = s.to_unit(&mid);
        assert!(u.iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(s.contains(&mid));
    }

    #[test]
    fn single_evaluation_budget() {
        let cfg = BoConfig {
            budget: 1,
            seed: 3,
            ..Default::default()
        };
        let r = bayes_optimize(|p| -(p[0] - 2.0).powi(2), &parabola(), &cfg).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.best_point, r.trace[0].point);
    }

    #[test]
    fn parabola_within_tolerance() {
        let grid_best = (0..=5000)
            .map(|i| i as f64 * 1e-3)
            .max_by(|a, b| (-(a - 2.0f64).powi(2)).total_cmp(&-(b - 2.0f64).powi(2)))
            .unwrap();
        let cfg = BoConfig {
            seed: 11,
            ..Default::default()
        };
        let r = bayes_optimize(|p| -(p[0] - 2.0).powi(2), &parabola(), &cfg).unwrap();
        assert!(r.trace.len() <= 30);
        assert!((r.best_point[0] - grid_best).abs() < 0.2, "{:?}", r.best_point);
    }

    #[test]
    fn failed_evaluations() {
        let cfg = BoConfig {
            budget: 4,
            ..Default::default()
        };
        assert!(matches!(
            bayes_optimize(|_| f64::NEG_INFINITY, &parabola(), &cfg),
            Err(Error::AllEvaluationsFailed)
        ));
        let mut n = 0;
        let r = bayes_optimize(
            |p| {
                n += 1;
                if n % 2 == 0 {
                    f64::NAN
                } else {
                    -p[0]
                }
            },
            &parabola(),
            &BoConfig {
                budget: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.trace.iter().filter(|e| e.objective == f64::NEG_INFINITY).count(), 5);
        assert!(r.best_objective.is_finite());
    }

    #[test]
    fn never_worse_than_initial_design() {
        for seed in 0..5 {
            let cfg = BoConfig {
                budget: 12,
                seed,
                ..Default::default()
            };
            let f = |p: &[f64]| (3.0 * p[0]).sin() - 0.1 * p[0];
            let r = bayes_optimize(f, &parabola(), &cfg).unwrap();
            let init_best = r.trace[..5]
                .iter()
                .map(|e| e.objective)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(r.best_objective >= init_best);
        }
    }

    #[test]
    fn gp_objective_examples() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 / 19.0);
        let y: Vec<f64> = x.column(0).iter().map(|v| 2.0 * v + 1.0).collect();
        let tr: Vec<usize> = (0..20).step_by(2).collect();
        let te: Vec<usize> = (1..20).step_by(2).collect();
        let xtr = x.select(ndarray::Axis(0), &tr);
        let xte = x.select(ndarray::Axis(0), &te);
        let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
        let yte: Vec<f64> = te.iter().map(|&i| y[i]).collect();
        let good = objective_gp(
            GpHyper::new(10.0, 1.0, 1e-8),
            false,
            (xtr.view(), &ytr),
            (xte.view(), &yte),
            LossKind::Mse,
        );
        assert!(good > -1e-4, "{good}");
        let noisy = objective_gp(
            GpHyper::new(10.0, 1.0, 1e3),
            false,
            (xtr.view(), &ytr),
            (xte.view(), &yte),
            LossKind::Mse,
        );
        assert!(noisy < good);
        let again = objective_gp(
            GpHyper::new(10.0, 1.0, 1e-8),
            false,
            (xtr.view(), &ytr),
            (xte.view(), &yte),
            LossKind::Mse,
        );
        assert_eq!(good.to_bits(), again.to_bits());
        let bad = array![[f64::NAN], [0.0]];
        let failed = objective_gp(
            GpHyper::new(1.0, 1.0, 0.0),
            false,
            (bad.view(), &[1.0, 2.0]),
            (xte.view(), &yte),
            LossKind::Mse,
        );
        assert_eq!(failed, f64::NEG_INFINITY);
    }

    #[test]
    fn tune_gp_improves_on_default() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| ((i * 13 + j * 7) % 17) as f64 / 17.0);
        let y: Array1<f64> = x.rows().into_iter().map(|r| (3.0 * r[0]).sin() + r[1] * r[1]).collect();
        let (a, b) = (x.slice(ndarray::s![..30, ..]), x.slice(ndarray::s![30.., ..]));
        let (ya, yb) = (&y.as_slice().unwrap()[..30], &y.as_slice().unwrap()[30..]);
        let cfg = BoConfig {
            budget: 15,
            seed: 2,
            ..Default::default()
        };
        let (tuned, res) = tune_gp((a, ya), (b, yb), LossKind::Mse, false, &SearchSpace::gp_default(), &cfg).unwrap();
        let base = objective_gp(GpConfig::default().hyper, false, (a, ya), (b, yb), LossKind::Mse);
        assert!(res.best_objective >= base || res.best_objective > -1e-3);
        assert_eq!(tuned.hyper, hyper_from_point(&res.best_point));
        let mut out = Vec::new();
        write_trace_csv(&res.trace, &["C".into(), "l".into(), "n".into()], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 16);
    }

    #[test]
    fn grid_examples() {
        let one = grid_search(|p| p[0], &[vec![4.0]]).unwrap();
        assert_eq!((one.best_point, one.table.len()), (vec![4.0], 1));
        // objective values: (0,0)=3 (0,1)=1 (1,0)=2 (1,1)=1 -> first 1 in row-major order
        let vals = [[3.0, 1.0], [2.0, 1.0]];
        let r = grid_search(
            |p| vals[p[0] as usize][p[1] as usize],
            &[vec![0.0, 1.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(r.best_point, vec![0.0, 1.0]);
        assert_eq!(r.best_objective, 1.0);
        assert_eq!(r.table.len(), 4);
        assert_eq!(r.table[2].point, vec![1.0, 0.0]);
        assert!(grid_search(|_| 0.0, &[vec![]]).is_err());
        let nan = grid_search(|p| if p[0] == 0.0 { f64::NAN } else { 5.0 }, &[vec![0.0, 1.0]]).unwrap();
        assert_eq!(nan.best_point, vec![1.0]);
    }

    proptest! {
        #[test]
        fn grid_is_order_invariant_without_ties(
            a in prop::collection::hash_set(-100i32..100, 1..6),
            b in prop::collection::hash_set(-100i32..100, 1..6),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            // injective in (x, y) over small integers, so no ties
            let f = |p: &[f64]| (p[0] - 3.3).abs() * 1000.0 + (p[1] + 7.5).abs() + p[1] * 1e-4;
            let r1 = grid_search(f, &[a.clone(), b.clone()]).unwrap();
            let mut ar = a.clone();
            ar.reverse();
            let mut br = b.clone();
            br.reverse();
            let r2 = grid_search(f, &[ar, br]).unwrap();
            prop_assert_eq!(r1.best_point, r2.best_point);
            prop_assert_eq!(r1.table.len(), a.len() * b.len());
        }
    }
}
