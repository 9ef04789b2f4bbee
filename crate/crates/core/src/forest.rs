//! Random-forest regression: bootstrap-aggregated CART trees split on
//! variance reduction, with impurity-based feature importances.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numcore::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Candidate features per split; `None` means `⌈d/3⌉`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 500,
            max_depth: None,
            min_samples_leaf: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn resolved_features(&self, d: usize) -> usize {
        self.features_per_split.unwrap_or(d.div_ceil(3)).clamp(1, d.max(1))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("forest needs at least one tree".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidConfig("min_samples_leaf must be at least 1".into()));
        }
        if let Some(k) = self.features_per_split {
            if k == 0 || k > d {
                return Err(Error::InvalidConfig(format!(
                    "features_per_split {k} outside 1..={d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A fitted CART tree. Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    /// Per-feature variance reduction weighted by node sample fraction.
    gains: Vec<f64>,
}

impl RegressionTree {
    pub fn leaf(value: f64, n_features: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
            gains: vec![0.0; n_features],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

struct TreeBuilder<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    cfg: &'a ForestConfig,
    k: usize,
    total: f64,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    gains: Vec<f64>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn mean_within(y: &[f64], idx: &[usize]) -> f64 {
    let (mut lo, mut hi, mut s) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &i in idx {
        lo = lo.min(y[i]);
        hi = hi.max(y[i]);
        s += y[i];
    }
    (s / idx.len() as f64).clamp(lo, hi)
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: mean_within(self.y, idx),
        });
        let n = idx.len();
        let leaf_min = self.cfg.min_samples_leaf;
        if n < 2 * leaf_min || self.cfg.max_depth.is_some_and(|m| depth >= m) {
            return id;
        }
        let Some(best) = self.best_split(idx) else {
            return id;
        };
        let (feature, threshold) = (best.feature, best.threshold);
        let x = self.x;
        idx.sort_by(|&a, &b| {
            let (va, vb) = (x.get(a, feature) <= threshold, x.get(b, feature) <= threshold);
            vb.cmp(&va).then(a.cmp(&b))
        });
        let n_left = idx.iter().take_while(|&&i| x.get(i, feature) <= threshold).count();
        self.gains[feature] += best.gain / self.total;
        let (l, r) = idx.split_at_mut(n_left);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Largest sum-of-squares reduction over the sampled features, scanning
    /// features in ascending index order and thresholds in ascending order so
    /// that ties resolve to the lowest of each.
    fn best_split(&mut self, idx: &[usize]) -> Option<BestSplit> {
        let d = self.x.cols();
        let mut features = sample(&mut self.rng, d, self.k).into_vec();
        features.sort_unstable();

        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let sum_sq: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let parent_sse = (sum_sq - sum * sum / n as f64).max(0.0);
        if parent_sse <= 0.0 {
            return None;
        }
        let floor = 1e-12 * parent_sse;
        let leaf_min = self.cfg.min_samples_leaf;

        let mut best: Option<BestSplit> = None;
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        for f in features {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.x.get(i, f), self.y[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            if order[0].0 == order[n - 1].0 {
                continue;
            }
            let (mut ls, mut lss) = (0.0, 0.0);
            for j in 0..n - 1 {
                let (v, t) = order[j];
                ls += t;
                lss += t * t;
                let nl = j + 1;
                let next = order[j + 1].0;
                if next == v || nl < leaf_min || n - nl < leaf_min {
                    continue;
                }
                let nr = (n - nl) as f64;
                let rs = sum - ls;
                let rss = sum_sq - lss;
                let child = (lss - ls * ls / nl as f64).max(0.0) + (rss - rs * rs / nr).max(0.0);
                let gain = parent_sse - child;
                if gain > floor && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = 0.5 * (v + next);
                    let threshold = if mid < next { mid } else { v };
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

/// Fit one tree on the rows `idx` (which may repeat for bootstrap samples).
pub fn fit_tree(
    x: &Matrix,
    y: &[f64],
    mut idx: Vec<usize>,
    cfg: &ForestConfig,
    rng: ChaCha8Rng,
) -> RegressionTree {
    let d = x.cols();
    let mut b = TreeBuilder {
        x,
        y,
        cfg,
        k: cfg.resolved_features(d),
        total: idx.len() as f64,
        rng,
        nodes: Vec::new(),
        gains: vec![0.0; d],
    };
    b.build(&mut idx, 0);
    RegressionTree {
        nodes: b.nodes,
        gains: b.gains,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<RegressionTree>,
    n_features: usize,
    importances: Vec<f64>,
    y_min: f64,
    y_max: f64,
}

impl Forest {
    /// Assemble a forest from fitted trees; importances are recomputed.
    pub fn from_trees(trees: Vec<RegressionTree>, n_features: usize, y_min: f64, y_max: f64) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidConfig("forest needs at least one tree".into()));
        }
        if let Some(t) = trees.iter().find(|t| t.gains.len() != n_features) {
            return Err(Error::DimensionMismatch(format!(
                "tree over {} features in a {n_features}-feature forest",
                t.gains.len()
            )));
        }
        let importances = normalized_importances(&trees, n_features);
        Ok(Self {
            trees,
            n_features,
            importances,
            y_min,
            y_max,
        })
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn importances(&self) -> &[f64] {
        &self.importances
    }

    pub fn target_range(&self) -> (f64, f64) {
        (self.y_min, self.y_max)
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict_row(x)).sum();
        (s / self.trees.len() as f64).clamp(self.y_min, self.y_max)
    }
}

fn normalized_importances(trees: &[RegressionTree], d: usize) -> Vec<f64> {
    let mut imp = vec![0.0; d];
    for t in trees {
        for (a, g) in imp.iter_mut().zip(&t.gains) {
            *a += g;
        }
    }
    let total: f64 = imp.iter().sum();
    if total > 0.0 {
        imp.iter_mut().for_each(|v| *v /= total);
    }
    imp
}

/// Fit a forest; trees are grown in parallel, each from its own stream
/// seeded with `seed + tree index`, so the result does not depend on thread
/// scheduling.
pub fn fit_forest(x: &Matrix, y: &[f64], cfg: &ForestConfig) -> Result<Forest> {
    let n = x.rows();
    if y.len() != n {
        return Err(Error::LengthMismatch(n, y.len()));
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "random forest needs at least 2 samples, got {n}"
        )));
    }
    if x.cols() == 0 {
        return Err(Error::DegenerateInput("random forest needs at least one feature".into()));
    }
    x.ensure_finite("forest inputs")?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forest targets".into()));
    }
    cfg.validate(x.cols())?;

    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
            let idx = if cfg.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree(x, y, idx, cfg, rng)
        })
        .collect();
    let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Forest::from_trees(trees, x.cols(), y_min, y_max)
}

pub fn predict_forest(forest: &Forest, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != forest.n_features {
        return Err(Error::DimensionMismatch(format!(
            "forest trained on {} features, got {}",
            forest.n_features,
            x.cols()
        )));
    }
    Ok((0..x.rows()).map(|i| forest.predict_row(x.row(i))).collect())
}

/// Normalized per-feature variance reduction (all zeros if no tree split).
pub fn feature_importance(forest: &Forest) -> Vec<f64> {
    forest.importances.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(bootstrap: bool) -> ForestConfig {
        ForestConfig {
            n_trees: 1,
            bootstrap,
            features_per_split: Some(1),
            min_samples_leaf: 1,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn constant_target_is_one_leaf() {
        let x = Matrix::from_fn(20, 3, |i, j| (i * 3 + j) as f64);
        let y = vec![0.7; 20];
        let f = fit_forest(&x, &y, &ForestConfig { n_trees: 5, ..Default::default() }).unwrap();
        for t in f.trees() {
            assert_eq!(t.nodes(), &[Node::Leaf { value: 0.7 }]);
        }
        assert_eq!(feature_importance(&f), vec![0.0; 3]);
    }

    #[test]
    fn step_function_is_fit_exactly() {
        let x = Matrix::from_fn(100, 1, |i, _| i as f64 / 50.0 - 1.0);
        let y: Vec<f64> = (0..100).map(|i| if x.get(i, 0) > 0.0 { 1.0 } else { 0.0 }).collect();
        let f = fit_forest(&x, &y, &single(false)).unwrap();
        assert_eq!(predict_forest(&f, &x).unwrap(), y);
        assert_eq!(f.trees()[0].n_leaves(), 2);
        assert_eq!(feature_importance(&f), vec![1.0]);
    }

    #[test]
    fn threshold_is_midpoint_of_neighbours() {
        let x = Matrix::column(&[1.0, 2.0, 4.0, 8.0]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let f = fit_forest(&x, &y, &single(false)).unwrap();
        match f.trees()[0].nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 3.0);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn ties_go_to_lowest_feature() {
        let x = Matrix::from_fn(6, 2, |i, _| i as f64);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let cfg = ForestConfig {
            features_per_split: Some(2),
            ..single(false)
        };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        assert!(matches!(f.trees()[0].nodes()[0], Node::Split { feature: 0, .. }));
        assert_eq!(feature_importance(&f), vec![1.0, 0.0]);
    }

    #[test]
    fn mean_of_tree_outputs() {
        let trees = vec![RegressionTree::leaf(0.1, 2), RegressionTree::leaf(0.3, 2)];
        let f = Forest::from_trees(trees, 2, 0.0, 1.0).unwrap();
        let p = predict_forest(&f, &Matrix::zeros(1, 2)).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-15);

        let f = Forest::from_trees(vec![RegressionTree::leaf(0.3, 2)], 2, 0.0, 1.0).unwrap();
        assert_eq!(predict_forest(&f, &Matrix::zeros(3, 2)).unwrap(), vec![0.3; 3]);
    }

    #[test]
    fn duplicating_trees_keeps_predictions() {
        let x = Matrix::from_fn(40, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let y: Vec<f64> = (0..40).map(|i| (i % 5) as f64 * 0.1).collect();
        let f = fit_forest(&x, &y, &ForestConfig { n_trees: 4, ..Default::default() }).unwrap();
        let mut twice = f.trees().to_vec();
        twice.extend_from_slice(f.trees());
        let g = Forest::from_trees(twice, 2, f.y_min, f.y_max).unwrap();
        let a = predict_forest(&f, &x).unwrap();
        let b = predict_forest(&g, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = ForestConfig::default();
        assert!(matches!(
            fit_forest(&Matrix::zeros(1, 2), &[1.0], &cfg),
            Err(Error::DegenerateInput(_))
        ));
        assert!(fit_forest(&Matrix::zeros(3, 2), &[1.0, 2.0], &cfg).is_err());
        let f = fit_forest(&Matrix::zeros(3, 2), &[1.0, 2.0, 3.0], &cfg).unwrap();
        assert!(matches!(
            predict_forest(&f, &Matrix::zeros(1, 3)),
            Err(Error::DimensionMismatch(_))
        ));
        let bad = ForestConfig {
            features_per_split: Some(5),
            ..cfg
        };
        assert!(fit_forest(&Matrix::zeros(3, 2), &[1.0, 2.0, 3.0], &bad).is_err());
    }
}
