//! CART random forests: binary classifier (gini) and regressor (squared error).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Splits whose impurity differs by less than this are treated as ties.
const TIE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaxFeatures {
    /// `⌈√d⌉` for classification, `d` for regression.
    Auto,
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, d: usize, classifier: bool) -> usize {
        let sqrt = (d as f64).sqrt().ceil() as usize;
        let k = match self {
            MaxFeatures::Auto if classifier => sqrt,
            MaxFeatures::Auto | MaxFeatures::All => d,
            MaxFeatures::Sqrt => sqrt,
            MaxFeatures::Count(k) => k,
        };
        k.clamp(1, d.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: MaxFeatures::Auto,
            bootstrap: true,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        impurity: f64,
        children_impurity: f64,
    },
    /// Class-1 frequency (classifier) or mean target (regressor).
    Leaf { value: f64, impurity: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// A single leaf predicting `value`.
    pub fn constant(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, impurity: 0.0 }],
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    task: Task,
    n_features: usize,
    trees: Vec<Tree>,
}

impl RandomForest {
    pub fn from_trees(task: Task, n_features: usize, trees: Vec<Tree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        Ok(Self {
            task,
            n_features,
            trees,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn task(&self) -> Task {
        self.task
    }

    fn mean_prediction(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "forest trained on {} features, input has {}",
                self.n_features,
                x.cols()
            )));
        }
        let n = self.trees.len() as f64;
        Ok((0..x.rows())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / n
            })
            .collect())
    }

    /// Mean over trees of the leaf class-1 frequency.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        if self.task != Task::Classification {
            return Err(Error::InvalidArgument("predict_proba on a regression forest".into()));
        }
        self.mean_prediction(x)
    }

    /// Mean over trees of the leaf target mean.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if self.task != Task::Regression {
            return Err(Error::InvalidArgument("predict on a classification forest; use predict_proba".into()));
        }
        self.mean_prediction(x)
    }
}

pub fn fit_classifier(x: &Matrix, y: &[u8], cfg: &ForestConfig) -> Result<RandomForest> {
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::BadLabel {
            label: bad as usize,
            classes: 2,
        });
    }
    let targets: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    fit(x, &targets, cfg, Task::Classification)
}

pub fn fit_regressor(x: &Matrix, y: &[f64], cfg: &ForestConfig) -> Result<RandomForest> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression target".into()));
    }
    fit(x, y, cfg, Task::Regression)
}

fn fit(x: &Matrix, y: &[f64], cfg: &ForestConfig, task: Task) -> Result<RandomForest> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::EmptyData);
    }
    if y.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!("{} targets for {} rows", y.len(), x.rows())));
    }
    if cfg.n_trees == 0 {
        return Err(Error::Config("n_trees must be at least 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let k = cfg.max_features.resolve(x.cols(), task == Task::Classification);
    let columns = x.transpose();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = root.substream("tree", t as u64);
            let samples: Vec<usize> = if cfg.bootstrap {
                (0..x.rows()).map(|_| rng.below(x.rows())).collect()
            } else {
                (0..x.rows()).collect()
            };
            TreeBuilder {
                x,
                columns: &columns,
                y,
                task,
                max_features: k,
                min_split: cfg.min_samples_split.max(2),
                max_depth: cfg.max_depth,
            }
            .build(samples, &mut rng)
        })
        .collect();
    RandomForest::from_trees(task, x.cols(), trees)
}

struct TreeBuilder<'a> {
    x: &'a Matrix,
    /// `x` transposed, so one feature is a contiguous slice.
    columns: &'a Matrix,
    y: &'a [f64],
    task: Task,
    max_features: usize,
    min_split: usize,
    max_depth: Option<usize>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeBuilder<'_> {
    fn impurity(&self, samples: &[usize]) -> f64 {
        let n = samples.len() as f64;
        let sum: f64 = samples.iter().map(|&i| self.y[i]).sum();
        match self.task {
            Task::Classification => {
                let p = sum / n;
                2.0 * p * (1.0 - p)
            }
            Task::Regression => {
                let mean = sum / n;
                samples.iter().map(|&i| (self.y[i] - mean).powi(2)).sum::<f64>() / n
            }
        }
    }

    fn build(&self, samples: Vec<usize>, rng: &mut Rng) -> Tree {
        let mut nodes = Vec::new();
        // (node slot, samples, depth)
        let mut stack = vec![(0usize, samples, 0usize)];
        nodes.push(Node::Leaf {
            value: 0.0,
            impurity: 0.0,
        });
        while let Some((slot, samples, depth)) = stack.pop() {
            let n = samples.len();
            let impurity = self.impurity(&samples);
            let value = samples.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
            let can_split = n >= self.min_split && impurity > 0.0 && self.max_depth.is_none_or(|d| depth < d);
            let split = if can_split { self.best_split(&samples, rng) } else { None };
            match split {
                None => nodes[slot] = Node::Leaf { value, impurity },
                Some(best) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        samples.iter().partition(|&&i| self.x.get(i, best.feature) <= best.threshold);
                    let left = nodes.len();
                    let right = left + 1;
                    let placeholder = Node::Leaf {
                        value: 0.0,
                        impurity: 0.0,
                    };
                    nodes.push(placeholder.clone());
                    nodes.push(placeholder);
                    nodes[slot] = Node::Split {
                        feature: best.feature,
                        threshold: best.threshold,
                        left,
                        right,
                        impurity,
                        children_impurity: best.score / n as f64,
                    };
                    stack.push((right, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
            }
        }
        Tree { nodes }
    }

    /// Searches a random subset of `max_features` features, continuing past
    /// it while no valid split has been found. `score` is the size-weighted
    /// child impurity sum (lower is better).
    fn best_split(&self, samples: &[usize], rng: &mut Rng) -> Option<BestSplit> {
        let d = self.x.cols();
        let mut features: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut features);
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
        for (visited, &f) in features.iter().enumerate() {
            if visited >= self.max_features && best.is_some() {
                break;
            }
            let column = self.columns.row(f);
            sorted.clear();
            sorted.extend(samples.iter().map(|&i| (column[i], i)));
            sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(c) = self.scan_feature(&sorted, f) {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        c.score < b.score - TIE_EPS
                            || ((c.score - b.score).abs() <= TIE_EPS && (c.feature, c.threshold) < (b.feature, b.threshold))
                    }
                };
                if better {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// `sorted` holds `(feature value, sample)` in ascending value order.
    fn scan_feature(&self, sorted: &[(f64, usize)], f: usize) -> Option<BestSplit> {
        let n = sorted.len();
        let total: f64 = sorted.iter().map(|&(_, i)| self.y[i]).sum();
        let total_sq: f64 = sorted.iter().map(|&(_, i)| self.y[i] * self.y[i]).sum();
        let (mut sum_l, mut sq_l) = (0.0, 0.0);
        let mut best: Option<BestSplit> = None;
        for k in 0..n - 1 {
            let (a, i) = sorted[k];
            let yi = self.y[i];
            sum_l += yi;
            sq_l += yi * yi;
            let b = sorted[k + 1].0;
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = (n - k - 1) as f64;
            let sum_r = total - sum_l;
            let score = match self.task {
                // n_l·gini_l + n_r·gini_r with gini = 2p(1−p)
                Task::Classification => 2.0 * (sum_l - sum_l * sum_l / nl) + 2.0 * (sum_r - sum_r * sum_r / nr),
                Task::Regression => {
                    let sq_r = total_sq - sq_l;
                    (sq_l - sum_l * sum_l / nl) + (sq_r - sum_r * sum_r / nr)
                }
            };
            let mut threshold = a + (b - a) / 2.0;
            if threshold >= b {
                threshold = a;
            }
            if best.as_ref().is_none_or(|bs| score < bs.score - TIE_EPS) {
                best = Some(BestSplit {
                    feature: f,
                    threshold,
                    score,
                });
            }
        }
        best
    }
}
