//! Random-forest regression (CART trees on bootstrap samples) with
//! out-of-bag permutation importance reported as %IncMSE.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::DesignMatrix;
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf { value: f64, n: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
    pub min_leaf: usize,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self { nodes: vec![TreeNode::Leaf { value, n: 1 }], min_leaf: 1 }
    }

    /// Predict from a feature lookup so callers can substitute single features.
    pub fn predict_with(&self, x: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x(*feature) <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_with(|j| x[j])
    }

    pub fn uses_feature(&self, j: usize) -> bool {
        self.nodes.iter().any(|n| matches!(n, TreeNode::Split { feature, .. } if *feature == j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub mtry: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl ForestParams {
    /// 500 trees, mtry ⌈p/3⌉, min_leaf 5.
    pub fn defaults(p: usize, seed: u64) -> Self {
        Self { trees: 500, mtry: p.div_ceil(3).max(1), min_leaf: 5, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
    pub bootstraps: Vec<Vec<usize>>,
    pub oob: Vec<Vec<bool>>,
    pub feature_names: Vec<String>,
    pub mtry: usize,
    pub seed: u64,
}

struct Grower<'a> {
    x: &'a DesignMatrix,
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let value = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(TreeNode::Leaf { value, n: rows.len() });
        self.nodes.len() - 1
    }

    /// Best (gain, feature, threshold) over a feature subset; SSE reduction.
    fn best_split(&self, rows: &[usize], features: &[usize]) -> Option<(f64, usize, f64)> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let total_sq: f64 = rows.iter().map(|&r| self.y[r] * self.y[r]).sum();
        let parent_sse = total_sq - total * total / n as f64;
        if parent_sse <= 1e-12 * total_sq.max(1e-300) {
            return None;
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        for &j in features {
            order.clear();
            order.extend(rows.iter().map(|&r| (self.x.get(r, j), self.y[r])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for i in 1..n {
                let (xv, yv) = order[i - 1];
                left_sum += yv;
                left_sq += yv * yv;
                if i < self.min_leaf || n - i < self.min_leaf || xv == order[i].0 {
                    continue;
                }
                let (nl, nr) = (i as f64, (n - i) as f64);
                let right_sum = total - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / nl) + (right_sq - right_sum * right_sum / nr);
                let gain = parent_sse - sse;
                let mut threshold = 0.5 * (xv + order[i].0);
                if threshold >= order[i].0 {
                    threshold = xv;
                }
                // strict improvement keeps the lower feature / lower threshold on ties
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, j, threshold));
                }
            }
        }
        best.filter(|(g, _, _)| *g > 1e-12 * parent_sse)
    }

    fn grow(&mut self, rows: Vec<usize>, rng: &mut StreamRng) -> usize {
        if rows.len() < 2 * self.min_leaf {
            return self.leaf(&rows);
        }
        let p = self.x.n_cols();
        let mut features = rand::seq::index::sample(rng, p, self.mtry).into_vec();
        features.sort_unstable();
        let Some((_, feature, threshold)) = self.best_split(&rows, &features) else {
            return self.leaf(&rows);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.x.get(r, feature) <= threshold);
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0, n: 0 });
        let left = self.grow(left_rows, rng);
        let right = self.grow(right_rows, rng);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }
}

/// Fit a seeded forest. Each tree draws its own bootstrap and feature
/// subsets from a per-tree stream, so the result does not depend on thread
/// scheduling.
pub fn fit_forest(x: &DesignMatrix, y: &[f64], params: ForestParams) -> Result<Forest> {
    let n = x.n_rows();
    let p = x.n_cols();
    if y.len() != n {
        return Err(Error::Shape(format!("{} responses for {n} rows", y.len())));
    }
    if n < 10 {
        return Err(Error::Argument(format!("forest needs at least 10 rows, got {n}")));
    }
    if params.mtry == 0 || params.mtry > p {
        return Err(Error::Argument(format!("mtry {} not in 1..={p}", params.mtry)));
    }
    if params.trees == 0 || params.min_leaf == 0 {
        return Err(Error::Argument("trees and min_leaf must be at least 1".into()));
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(Error::DegenerateTarget);
    }
    let seeds = SeedStream::new(params.seed);
    let grown: Vec<(RegressionTree, Vec<usize>, Vec<bool>)> = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeds.rng_indexed("tree", t as u64);
            let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut oob = vec![true; n];
            for &r in &boot {
                oob[r] = false;
            }
            let mut g = Grower { x, y, mtry: params.mtry, min_leaf: params.min_leaf, nodes: Vec::new() };
            g.grow(boot.clone(), &mut rng);
            (RegressionTree { nodes: g.nodes, min_leaf: params.min_leaf }, boot, oob)
        })
        .collect();
    let mut trees = Vec::with_capacity(params.trees);
    let mut bootstraps = Vec::with_capacity(params.trees);
    let mut oob = Vec::with_capacity(params.trees);
    for (t, b, o) in grown {
        trees.push(t);
        bootstraps.push(b);
        oob.push(o);
    }
    Ok(Forest { trees, bootstraps, oob, feature_names: x.names.clone(), mtry: params.mtry, seed: params.seed })
}

impl Forest {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Mean of the first `k` trees (all trees when `k` exceeds the count).
    pub fn predict_first(&self, x: &[f64], k: usize) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::Shape(format!("{} features, forest expects {}", x.len(), self.n_features())));
        }
        let k = k.min(self.trees.len());
        Ok(self.trees[..k].iter().map(|t| t.predict(x)).sum::<f64>() / k as f64)
    }
}

pub fn predict_forest(forest: &Forest, x: &[f64]) -> Result<f64> {
    forest.predict_first(x, forest.trees.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub features: Vec<String>,
    pub pct_inc_mse: Vec<f64>,
    /// 1 = most important.
    pub rank: Vec<usize>,
    pub baseline_oob_mse: f64,
    pub excluded_rows: usize,
}

impl ImportanceReport {
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut idx: Vec<usize> = (0..self.features.len()).collect();
        idx.sort_by_key(|&j| self.rank[j]);
        idx.into_iter().map(|j| (self.features[j].as_str(), self.pct_inc_mse[j])).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.features.iter().position(|f| f == name).map(|j| self.pct_inc_mse[j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        writeln!(f, "feature,pct_inc_mse,rank")?;
        let mut idx: Vec<usize> = (0..self.features.len()).collect();
        idx.sort_by_key(|&j| self.rank[j]);
        for j in idx {
            writeln!(f, "{},{},{}", self.features[j], self.pct_inc_mse[j], self.rank[j])?;
        }
        Ok(())
    }
}

/// %IncMSE per feature: the relative increase of out-of-bag MSE when the
/// feature's column is permuted, averaged over `repeats` permutations.
pub fn oob_permutation_importance(forest: &Forest, x: &DesignMatrix, y: &[f64], repeats: usize, seed: u64) -> Result<ImportanceReport> {
    let n = x.n_rows();
    let p = x.n_cols();
    if y.len() != n || forest.oob.iter().any(|o| o.len() != n) || p != forest.n_features() {
        return Err(Error::Shape("importance data does not match the fitted forest".into()));
    }
    if repeats == 0 {
        return Err(Error::Argument("repeats must be at least 1".into()));
    }
    let oob_trees: Vec<Vec<usize>> = (0..n)
        .map(|r| (0..forest.trees.len()).filter(|&t| forest.oob[t][r]).collect())
        .collect();
    let covered: Vec<usize> = (0..n).filter(|&r| !oob_trees[r].is_empty()).collect();
    let excluded_rows = n - covered.len();
    if excluded_rows > 0 {
        log::warn!("{excluded_rows} rows are out-of-bag for no tree and are excluded from importance");
    }
    if covered.is_empty() {
        return Err(Error::Contract("no row is out-of-bag for any tree".into()));
    }
    let oob_mse = |value: &dyn Fn(usize, usize) -> f64| -> f64 {
        covered
            .iter()
            .map(|&r| {
                let trees = &oob_trees[r];
                let pred = trees.iter().map(|&t| forest.trees[t].predict_with(|j| value(r, j))).sum::<f64>() / trees.len() as f64;
                (pred - y[r]).powi(2)
            })
            .sum::<f64>()
            / covered.len() as f64
    };
    let baseline = oob_mse(&|r, j| x.get(r, j));
    let seeds = SeedStream::new(seed);
    let pct: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut total = 0.0;
            for rep in 0..repeats {
                let mut rng = seeds.rng_indexed(&format!("permute/{j}"), rep as u64);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let permuted = oob_mse(&|r, k| if k == j { x.get(perm[r], j) } else { x.get(r, k) });
                total += if baseline > 0.0 {
                    100.0 * (permuted - baseline) / baseline
                } else if permuted > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
            }
            total / repeats as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| pct[b].total_cmp(&pct[a]).then(a.cmp(&b)));
    let mut rank = vec![0; p];
    for (k, &j) in order.iter().enumerate() {
        rank[j] = k + 1;
    }
    Ok(ImportanceReport { features: x.names.clone(), pct_inc_mse: pct, rank, baseline_oob_mse: baseline, excluded_rows })
}
