//! Second-order gradient boosting of depth-limited regression trees for
//! squared error, with exact greedy split search.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseScore {
    Mean,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// L1 penalty on leaf weights.
    pub alpha: f64,
    /// Minimum split gain.
    pub gamma: f64,
    pub min_child_weight: f64,
    pub subsample: f64,
    pub colsample: f64,
    pub base_score: BaseScore,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            n_trees: 300,
            learning_rate: 0.05,
            max_depth: 3,
            lambda: 0.1,
            alpha: 0.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            subsample: 0.8,
            colsample: 0.6,
            base_score: BaseScore::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.predict_first(x, self.trees.len())
    }

    /// Prediction using only the first `k` trees.
    pub fn predict_first(&self, x: ArrayView2<f64>, k: usize) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                let boost: f64 = self.trees[..k.min(self.trees.len())]
                    .iter()
                    .map(|t| t.predict_row(row))
                    .sum();
                self.base_score + self.learning_rate * boost
            })
            .collect()
    }
}

/// L1 soft-threshold of a gradient sum.
fn soft_threshold(g: f64, alpha: f64) -> f64 {
    g.signum() * (g.abs() - alpha).max(0.0)
}

/// Optimal leaf weight `−T_α(G)/(H+λ)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    -soft_threshold(g, alpha) / (h + lambda)
}

fn score(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let t = soft_threshold(g, alpha);
    t * t / (h + lambda)
}

struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    grad: &'a [f64],
    hess: &'a [f64],
    features: Vec<usize>,
    cfg: &'a GbtConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn best_split(&self, rows: &[usize], g_total: f64, h_total: f64) -> Option<SplitCandidate> {
        let cfg = self.cfg;
        let parent = score(g_total, h_total, cfg.lambda, cfg.alpha);
        let mut best: Option<SplitCandidate> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for &f in &self.features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.x[[r, f]], r)));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..sorted.len() - 1 {
                let (v, r) = sorted[i];
                gl += self.grad[r];
                hl += self.hess[r];
                let next = sorted[i + 1].0;
                if next <= v {
                    continue;
                }
                let (gr, hr) = (g_total - gl, h_total - hl);
                if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (score(gl, hl, cfg.lambda, cfg.alpha) + score(gr, hr, cfg.lambda, cfg.alpha) - parent)
                    - cfg.gamma;
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = v + (next - v) / 2.0;
                    if threshold <= v {
                        threshold = next;
                    }
                    best = Some(SplitCandidate {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            weight: leaf_weight(g, h, self.cfg.lambda, self.cfg.alpha),
        });
        if depth >= self.cfg.max_depth || rows.len() < 2 {
            return at;
        }
        let Some(split) = self.best_split(&rows, g, h) else {
            return at;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| self.x[[r, split.feature]] < split.threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}

fn check(cfg: &GbtConfig) -> Result<()> {
    let frac_ok = |v: f64| v > 0.0 && v <= 1.0;
    if !frac_ok(cfg.subsample) || !frac_ok(cfg.colsample) {
        return Err(Error::invalid("subsample and colsample must lie in (0, 1]"));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.alpha >= 0.0) || !(cfg.learning_rate >= 0.0) {
        return Err(Error::invalid("lambda, alpha and learning rate must be non-negative"));
    }
    Ok(())
}

pub fn fit_gbt(x: ArrayView2<f64>, y: &[f64], cfg: &GbtConfig, seed: u64) -> Result<GbtModel> {
    check(cfg)?;
    let (n, d) = x.dim();
    if n < 2 || y.len() != n {
        return Err(Error::invalid(format!(
            "boosting needs >= 2 rows with targets, got {n} / {}",
            y.len()
        )));
    }
    let base_score = match cfg.base_score {
        BaseScore::Mean => y.iter().sum::<f64>() / n as f64,
        BaseScore::Fixed(v) => v,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = vec![base_score; n];
    let hess = vec![1.0; n];
    let mut grad = vec![0.0; n];
    let n_rows = ((n as f64 * cfg.subsample).round() as usize).clamp(1, n);
    let n_cols = ((d as f64 * cfg.colsample).round() as usize).clamp(1, d.max(1));
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for _ in 0..cfg.n_trees {
        for i in 0..n {
            grad[i] = pred[i] - y[i];
        }
        let mut rows = if n_rows == n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, n_rows).into_vec()
        };
        rows.sort_unstable();
        let mut features = if n_cols == d {
            (0..d).collect()
        } else {
            sample(&mut rng, d, n_cols).into_vec()
        };
        features.sort_unstable();
        let mut builder = Builder {
            x,
            grad: &grad,
            hess: &hess,
            features,
            cfg,
            nodes: Vec::new(),
        };
        builder.grow(rows, 0);
        let tree = Tree { nodes: builder.nodes };
        for (p, row) in pred.iter_mut().zip(x.rows()) {
            *p += cfg.learning_rate * tree.predict_row(row);
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        base_score,
        learning_rate: cfg.learning_rate,
        trees,
    })
}
