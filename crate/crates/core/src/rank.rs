//! Random-forest feature ranking by mean decrease in Gini impurity.
//!
//! Trees are CART classifiers on bootstrap samples. Each split maximises the
//! bootstrap-weighted Gini decrease over `mtry` random candidate features;
//! ties go to the lowest feature index, then the lowest threshold, so forests
//! are reproducible across platforms and thread counts.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{stratified_subject_folds, EvalError};
use crate::preprocess::{smote_oversample, PreprocessError, SmoteConfig};
use crate::rng::{mix, stream_rng, Stream};
use crate::table::NumericTable;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("node has no samples")]
    EmptyNode,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("input has missing or non-finite cells")]
    Incomplete,
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("{0} labels for {1} rows")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Folds(#[from] EvalError),
}

pub type Result<T, E = RankError> = std::result::Result<T, E>;

/// `1 − Σ (n_c / n)²`
pub fn gini_impurity(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(RankError::EmptyNode);
    }
    Ok(1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>())
}

fn gini2(pos: f64, total: f64) -> f64 {
    let p = pos / total;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
    /// Candidate features per split; `None` means ⌈√p⌉.
    #[serde(default)]
    pub mtry: Option<usize>,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub oob: bool,
}

fn default_trees() -> usize {
    100
}

fn default_min_leaf() -> usize {
    1
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: None, mtry: None, min_leaf: 1, seed: 0, oob: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { positive: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    /// Gini decrease per feature, as a fraction of the bootstrap sample size.
    importance: Vec<f64>,
}

impl Tree {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { positive } => return positive,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Normalised mean decrease in impurity; sums to 1 unless no tree split.
    pub importances: Vec<f64>,
    pub oob_accuracy: Option<f64>,
}

impl Forest {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_proba(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.predict_proba(x) > 0.5
    }
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [bool],
    weight: Vec<f64>,
    mtry: usize,
    min_leaf: f64,
    max_depth: usize,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    root_weight: f64,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl Builder<'_> {
    fn node_stats(&self, rows: &[usize]) -> (f64, f64) {
        rows.iter().fold((0.0, 0.0), |(w, pos), &i| {
            let wi = self.weight[i];
            (w + wi, pos + if self.y[i] { wi } else { 0.0 })
        })
    }

    fn grow<R: Rng>(&mut self, rows: Vec<usize>, depth: usize, rng: &mut R) -> usize {
        let (w, pos) = self.node_stats(&rows);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { positive: pos / w });
        let pure = pos == 0.0 || pos == w;
        if pure || depth >= self.max_depth || w < 2.0 * self.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&rows, w, pos, rng) else { return id };
        self.importance[split.feature] += split.decrease / self.root_weight;
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| self.x[(i, split.feature)] <= split.threshold);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }

    fn best_split<R: Rng>(&self, rows: &[usize], w: f64, pos: f64, rng: &mut R) -> Option<SplitChoice> {
        let p = self.x.ncols();
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(rng);
        let parent = w * gini2(pos, w);
        let mut best: Option<SplitChoice> = None;
        let mut sorted: Vec<(f64, f64, f64)> = Vec::with_capacity(rows.len());
        for (visited, &f) in order.iter().enumerate() {
            // keep drawing past mtry only while no valid split has been found
            if visited >= self.mtry && best.is_some() {
                break;
            }
            sorted.clear();
            sorted.extend(rows.iter().map(|&i| (self.x[(i, f)], self.weight[i], if self.y[i] { self.weight[i] } else { 0.0 })));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut wl, mut pl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                wl += sorted[k].1;
                pl += sorted[k].2;
                if sorted[k].0 == sorted[k + 1].0 {
                    continue;
                }
                let wr = w - wl;
                if wl < self.min_leaf || wr < self.min_leaf {
                    continue;
                }
                let pr = pos - pl;
                let decrease = parent - wl * gini2(pl, wl) - wr * gini2(pr, wr);
                let threshold = 0.5 * (sorted[k].0 + sorted[k + 1].0);
                let better = match &best {
                    None => true,
                    Some(b) => {
                        decrease > b.decrease
                            || (decrease == b.decrease && (f, threshold) < (b.feature, b.threshold))
                    }
                };
                if better {
                    best = Some(SplitChoice { feature: f, threshold, decrease: decrease.max(0.0) });
                }
            }
        }
        best
    }
}

fn fit_tree(x: &DMatrix<f64>, y: &[bool], weight: Vec<f64>, config: &ForestConfig, mtry: usize, rng: &mut impl Rng) -> Tree {
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| weight[i] > 0.0).collect();
    let root_weight = weight.iter().sum();
    let mut b = Builder {
        x,
        y,
        weight,
        mtry,
        min_leaf: config.min_leaf as f64,
        max_depth: config.max_depth.unwrap_or(usize::MAX),
        nodes: Vec::new(),
        importance: vec![0.0; x.ncols()],
        root_weight,
    };
    b.grow(rows, 0, rng);
    Tree { nodes: b.nodes, importance: b.importance }
}

pub fn fit_random_forest(x: &DMatrix<f64>, y: &[bool], config: &ForestConfig) -> Result<Forest> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(RankError::LengthMismatch(y.len(), n));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RankError::Incomplete);
    }
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(RankError::InvalidConfig("n_trees and min_leaf must be positive".into()));
    }
    let mtry = config.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize);
    if p == 0 || mtry == 0 || mtry > p {
        return Err(RankError::InvalidConfig(format!("mtry {mtry} outside 1..={p}")));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(RankError::SingleClass);
    }
    let trees: Vec<(Tree, Vec<f64>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(config.seed, Stream::Forest, t as u64);
            let mut weight = vec![0.0; n];
            for _ in 0..n {
                weight[rng.random_range(0..n)] += 1.0;
            }
            let tree = fit_tree(x, y, weight.clone(), config, mtry, &mut rng);
            (tree, weight)
        })
        .collect();

    let mut importances = vec![0.0; p];
    for (tree, _) in &trees {
        for (acc, v) in importances.iter_mut().zip(&tree.importance) {
            *acc += v;
        }
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }

    let oob_accuracy = config.oob.then(|| {
        let mut correct = 0usize;
        let mut scored = 0usize;
        for i in 0..n {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let votes: Vec<f64> = trees.iter().filter(|(_, w)| w[i] == 0.0).map(|(t, _)| t.predict_proba(&row)).collect();
            if votes.is_empty() {
                continue;
            }
            scored += 1;
            let prob = votes.iter().sum::<f64>() / votes.len() as f64;
            if (prob > 0.5) == y[i] {
                correct += 1;
            }
        }
        correct as f64 / scored.max(1) as f64
    });
    Ok(Forest { trees: trees.into_iter().map(|(t, _)| t).collect(), importances, oob_accuracy })
}

pub const DEFAULT_TOP: usize = 20;
pub const SUBGROUP_TOP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default = "default_top")]
    pub n_top: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Oversampling applied to each training split; `None` disables it.
    #[serde(default = "default_smote")]
    pub smote: Option<SmoteConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_top() -> usize {
    DEFAULT_TOP
}

fn default_folds() -> usize {
    5
}

fn default_smote() -> Option<SmoteConfig> {
    Some(SmoteConfig::default())
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { forest: ForestConfig::default(), n_top: DEFAULT_TOP, folds: 5, smote: default_smote(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub name: String,
    pub mean: f64,
    pub per_fold: Vec<f64>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    /// Sorted by rank (1 = most important).
    pub rows: Vec<ImportanceRow>,
    pub top: Vec<String>,
}

impl ImportanceTable {
    pub fn to_csv_string(&self) -> String {
        let folds = self.rows.first().map_or(0, |r| r.per_fold.len());
        let mut out = String::from("feature,mean");
        for f in 1..=folds {
            out.push_str(&format!(",fold{f}"));
        }
        out.push_str(",rank\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.name, r.mean));
            for v in &r.per_fold {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.rank));
        }
        out
    }
}

/// Cross-validated importance ranking. Each fold oversamples its training
/// split, fits a forest and records normalised importances; features are
/// ranked by the cross-fold mean (ties → lower column index).
pub fn rank_features(table: &NumericTable, config: &RankConfig) -> Result<ImportanceTable> {
    if !table.is_complete() || table.data.iter().any(|v| !v.is_finite()) {
        return Err(RankError::Incomplete);
    }
    let folds = stratified_subject_folds(&table.keys, &table.outcome, config.folds, config.seed)?;
    let discrete: Vec<bool> = table.kinds.iter().map(|k| k.is_discrete()).collect();
    let p = table.ncols();
    let per_fold: Vec<Vec<f64>> = (0..config.folds)
        .map(|f| {
            let train: Vec<usize> = (0..table.nrows()).filter(|&i| folds.fold_of_row(&table.keys[i]) != Some(f)).collect();
            let x = table.data.select_rows(&train);
            let y: Vec<bool> = train.iter().map(|&i| table.outcome[i]).collect();
            let fold_seed = mix(config.seed, f as u64);
            let (x, y) = match &config.smote {
                Some(smote) => {
                    let out = smote_oversample(&x, &y, &discrete, smote, fold_seed)?;
                    (out.data, out.labels)
                }
                None => (x, y),
            };
            let forest = fit_random_forest(&x, &y, &ForestConfig { seed: fold_seed, ..config.forest.clone() })?;
            Ok(forest.importances)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<ImportanceRow> = (0..p)
        .map(|j| {
            let vals: Vec<f64> = per_fold.iter().map(|f| f[j]).collect();
            ImportanceRow { name: table.names[j].clone(), mean: vals.iter().sum::<f64>() / vals.len() as f64, per_fold: vals, rank: 0 }
        })
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| rows[b].mean.total_cmp(&rows[a].mean).then(a.cmp(&b)));
    for (r, &j) in order.iter().enumerate() {
        rows[j].rank = r + 1;
    }
    rows.sort_by_key(|r| r.rank);
    let top = rows.iter().take(config.n_top).map(|r| r.name.clone()).collect();
    Ok(ImportanceTable { rows, top })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini_impurity(&[5.0, 5.0]).unwrap(), 0.5);
        assert_eq!(gini_impurity(&[7.0, 0.0]).unwrap(), 0.0);
        assert!((gini_impurity(&[1.0, 3.0]).unwrap() - 0.375).abs() < 1e-15);
        assert!(matches!(gini_impurity(&[0.0, 0.0]), Err(RankError::EmptyNode)));
    }

    fn planted(n: usize, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = stream_rng(seed, Stream::Features, 0);
        let x = DMatrix::from_fn(n, 4, |_, j| if j == 3 { 1.0 } else { rng.random::<f64>() });
        let y = (0..n).map(|i| x[(i, 1)] > 0.5).collect();
        (x, y)
    }

    #[test]
    fn separable_feature_wins_and_constant_scores_zero() {
        let (x, y) = planted(200, 1);
        let forest = fit_random_forest(&x, &y, &ForestConfig { n_trees: 50, seed: 3, oob: true, ..Default::default() }).unwrap();
        let imp = &forest.importances;
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(imp[3], 0.0);
        assert!(imp[1] > imp[0] && imp[1] > imp[2]);
        assert!(forest.oob_accuracy.unwrap() > 0.9);
    }

    #[test]
    fn forests_are_deterministic() {
        let (x, y) = planted(120, 2);
        let cfg = ForestConfig { n_trees: 20, seed: 11, ..Default::default() };
        let a = fit_random_forest(&x, &y, &cfg).unwrap();
        let b = fit_random_forest(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DMatrix::from_element(4, 2, 1.0);
        assert!(matches!(fit_random_forest(&x, &[true; 4], &ForestConfig::default()), Err(RankError::SingleClass)));
    }

    #[test]
    fn fully_grown_trees_fit_training_data() {
        let (x, y) = planted(100, 5);
        let forest = fit_random_forest(&x, &y, &ForestConfig { n_trees: 1, mtry: Some(4), ..Default::default() }).unwrap();
        let tree = &forest.trees[0];
        // with one tree every in-bag row lands in a pure leaf
        assert!(tree.n_nodes() >= 3);
        let correct = (0..100).filter(|&i| (tree.predict_proba(&x.row(i).iter().copied().collect::<Vec<_>>()) > 0.5) == y[i]).count();
        assert!(correct >= 90);
    }
}
