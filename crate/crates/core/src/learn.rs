//! Classifiers, weighted classification metrics and cross-participant
//! validation.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{anova_f_scores, build_features, select_k_best, take_columns, FeatureMatrix, FeatureMode, Scaler};
use crate::model::{EpochSet, Group, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Knn,
    RandomForest,
    LinearSvm,
    BoostedTrees,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] =
        [ClassifierKind::Knn, ClassifierKind::RandomForest, ClassifierKind::LinearSvm, ClassifierKind::BoostedTrees];

    /// Short CLI name.
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Knn => "knn",
            ClassifierKind::RandomForest => "rf",
            ClassifierKind::LinearSvm => "svm",
            ClassifierKind::BoostedTrees => "gbdt",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(ClassifierKind::Knn),
            "rf" | "random_forest" => Ok(ClassifierKind::RandomForest),
            "svm" | "linear_svm" => Ok(ClassifierKind::LinearSvm),
            "gbdt" | "boosted_trees" | "lightgbm" => Ok(ClassifierKind::BoostedTrees),
            other => Err(Error::Config(format!("unknown model '{other}' (expected knn, rf, svm or gbdt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub knn_k: usize,
    pub rf_trees: usize,
    pub rf_min_leaf: usize,
    pub rf_bootstrap: bool,
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub gbdt_rounds: usize,
    pub gbdt_learning_rate: f64,
    pub gbdt_max_leaves: usize,
    pub gbdt_bins: usize,
    pub gbdt_min_data_in_leaf: usize,
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn new(kind: ClassifierKind) -> Self {
        ClassifierSpec {
            kind,
            knn_k: 5,
            rf_trees: 100,
            rf_min_leaf: 1,
            rf_bootstrap: true,
            svm_c: 1.0,
            svm_epochs: 200,
            gbdt_rounds: 100,
            gbdt_learning_rate: 0.1,
            gbdt_max_leaves: 31,
            gbdt_bins: 64,
            gbdt_min_data_in_leaf: 20,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("knn_k", self.knn_k),
            ("rf_trees", self.rf_trees),
            ("rf_min_leaf", self.rf_min_leaf),
            ("svm_epochs", self.svm_epochs),
            ("gbdt_rounds", self.gbdt_rounds),
            ("gbdt_min_data_in_leaf", self.gbdt_min_data_in_leaf),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.gbdt_max_leaves < 2 || self.gbdt_bins < 2 {
            return Err(Error::Config("gbdt_max_leaves and gbdt_bins must be at least 2".into()));
        }
        if !(self.svm_c > 0.0 && self.svm_c.is_finite()) {
            return Err(Error::Config("svm_c must be positive".into()));
        }
        if !(self.gbdt_learning_rate > 0.0 && self.gbdt_learning_rate.is_finite()) {
            return Err(Error::Config("gbdt_learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted classifier. Immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Knn(KnnModel),
    Forest(ForestModel),
    Svm(SvmModel),
    Boosted(BoostedModel),
}

fn check_training(x: &[Vec<f64>], y: &[u8]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Data("training needs equal, nonzero counts of rows and labels".into()));
    }
    let p = x[0].len();
    if p == 0 {
        return Err(Error::Data("training rows have no columns".into()));
    }
    for (r, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(Error::Data(format!("training row {r} has {} columns, expected {p}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("training row {r} contains a non-finite value")));
        }
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::Data("training labels contain a single class".into()));
    }
    Ok(p)
}

pub fn fit(spec: &ClassifierSpec, x: &[Vec<f64>], y: &[u8]) -> Result<Model> {
    spec.validate()?;
    check_training(x, y)?;
    Ok(match spec.kind {
        ClassifierKind::Knn => Model::Knn(KnnModel::fit(spec.knn_k, x, y)),
        ClassifierKind::RandomForest => Model::Forest(ForestModel::fit(spec, x, y)),
        ClassifierKind::LinearSvm => Model::Svm(SvmModel::fit(spec, x, y)),
        ClassifierKind::BoostedTrees => Model::Boosted(BoostedModel::fit(spec, x, y)),
    })
}

impl Model {
    pub fn n_features(&self) -> usize {
        match self {
            Model::Knn(m) => m.x[0].len(),
            Model::Forest(m) => m.n_features,
            Model::Svm(m) => m.w.len(),
            Model::Boosted(m) => m.n_features,
        }
    }

    /// Class-1 score of one row, in [0, 1]. The row length is not checked.
    pub fn score_row(&self, row: &[f64]) -> f64 {
        match self {
            Model::Knn(m) => m.score(row),
            Model::Forest(m) => m.score(row),
            Model::Svm(m) => logistic(m.margin(row)),
            Model::Boosted(m) => logistic(m.raw(row)),
        }
    }

    pub fn predict_score(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = self.n_features();
        if let Some((r, row)) = x.iter().enumerate().find(|(_, row)| row.len() != p) {
            return Err(Error::Data(format!("row {r} has {} columns, model expects {p}", row.len())));
        }
        Ok(x.iter().map(|row| self.score_row(row)).collect())
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<u8>> {
        Ok(self.predict_score(x)?.into_iter().map(|s| u8::from(s >= 0.5)).collect())
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    x: Vec<Vec<f64>>,
    y: Vec<u8>,
}

impl KnnModel {
    fn fit(k: usize, x: &[Vec<f64>], y: &[u8]) -> Self {
        KnnModel { k: k.min(x.len()), x: x.to_vec(), y: y.to_vec() }
    }

    fn score(&self, row: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, t)| (t.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ones = d[..self.k].iter().filter(|(_, i)| self.y[*i] == 1).count();
        ones as f64 / self.k as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Flat binary tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn eval(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    n_features: usize,
}

struct CartBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    mtry: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl CartBuilder<'_> {
    fn gini(ones: usize, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let p = ones as f64 / n as f64;
        2.0 * p * (1.0 - p)
    }

    /// Best (feature, threshold, impurity decrease) over a random feature
    /// subset. Constant features do not count towards `mtry`.
    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let n = rows.len();
        let ones = rows.iter().filter(|&&r| self.y[r] == 1).count();
        let parent = Self::gini(ones, n);
        let mut order: Vec<usize> = (0..self.x[0].len()).collect();
        order.shuffle(rng);
        let mut tried = 0;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(n);
        for f in order {
            if tried == self.mtry {
                break;
            }
            pairs.clear();
            pairs.extend(rows.iter().map(|&r| (self.x[r][f], self.y[r])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[n - 1].0 {
                continue;
            }
            tried += 1;
            let mut left_ones = 0;
            for i in 0..n - 1 {
                left_ones += usize::from(pairs[i].1 == 1);
                if pairs[i].0 == pairs[i + 1].0 {
                    continue;
                }
                let nl = i + 1;
                let nr = n - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let child = (nl as f64 * Self::gini(left_ones, nl) + nr as f64 * Self::gini(ones - left_ones, nr))
                    / n as f64;
                let gain = parent - child;
                if best.map_or(true, |(_, _, g)| gain > g) {
                    best = Some((f, 0.5 * (pairs[i].0 + pairs[i + 1].0), gain));
                }
            }
        }
        best.filter(|b| b.2 > 0.0).map(|(f, t, _)| (f, t))
    }

    fn grow(&mut self, rows: Vec<usize>, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let ones = rows.iter().filter(|&&r| self.y[r] == 1).count();
        let vote = if 2 * ones > rows.len() { 1.0 } else { 0.0 };
        self.nodes.push(TreeNode::Leaf(vote));
        if ones == 0 || ones == rows.len() || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&rows, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }
}

impl ForestModel {
    fn fit(spec: &ClassifierSpec, x: &[Vec<f64>], y: &[u8]) -> Self {
        let p = x[0].len();
        let mtry = ((p as f64).sqrt().floor() as usize).max(1);
        let trees = (0..spec.rf_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(t as u64);
                let rows: Vec<usize> = if spec.rf_bootstrap {
                    (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let mut b = CartBuilder { x, y, mtry, min_leaf: spec.rf_min_leaf, nodes: Vec::new() };
                b.grow(rows, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        ForestModel { trees, n_features: p }
    }

    fn score(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.eval(row)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Linear SVM trained by Pegasos sub-gradient descent on the L2-regularised
/// hinge loss. The bias rides along as a constant unit feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl SvmModel {
    fn fit(spec: &ClassifierSpec, x: &[Vec<f64>], y: &[u8]) -> Self {
        let n = x.len();
        let p = x[0].len();
        let lambda = 1.0 / (spec.svm_c * n as f64);
        let mut w = vec![0.0; p + 1];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0usize;
        for _ in 0..spec.svm_epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let yi = if y[i] == 1 { 1.0 } else { -1.0 };
                let margin = yi * (x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[p]);
                let shrink = 1.0 - eta * lambda;
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    for (wj, xj) in w.iter_mut().zip(&x[i]) {
                        *wj += eta * yi * xj;
                    }
                    w[p] += eta * yi;
                }
            }
        }
        let bias = w.pop().expect("bias slot");
        SvmModel { w, bias }
    }

    pub fn margin(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }
}

/// Histogram gradient-boosted trees on the logistic loss with leaf-wise
/// growth.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostedModel {
    pub init: f64,
    pub trees: Vec<Tree>,
    n_features: usize,
}

/// Split candidates per feature: at most `bins − 1` upper edges.
fn bin_edges(x: &[Vec<f64>], feature: usize, bins: usize) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().map(|r| r[feature]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.len() <= bins {
        return v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let mut edges: Vec<f64> = (1..bins)
        .map(|b| {
            let pos = b * (v.len() - 1) / bins;
            0.5 * (v[pos] + v[pos + 1])
        })
        .collect();
    edges.dedup();
    edges
}

struct LeafState {
    rows: Vec<usize>,
    g: f64,
    h: f64,
    node: usize,
    split: Option<(usize, usize, f64)>,
}

const GBDT_L2: f64 = 1e-3;
const GBDT_MIN_HESSIAN: f64 = 1e-3;

impl BoostedModel {
    fn fit(spec: &ClassifierSpec, x: &[Vec<f64>], y: &[u8]) -> Self {
        let n = x.len();
        let p = x[0].len();
        let edges: Vec<Vec<f64>> = (0..p).map(|f| bin_edges(x, f, spec.gbdt_bins)).collect();
        let binned: Vec<Vec<u16>> = x
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&edges)
                    .map(|(v, e)| e.partition_point(|edge| edge < v) as u16)
                    .collect()
            })
            .collect();
        let pos = y.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
        let init = (pos / (1.0 - pos)).ln();
        let mut raw = vec![init; n];
        let mut trees = Vec::with_capacity(spec.gbdt_rounds);
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        for _ in 0..spec.gbdt_rounds {
            for i in 0..n {
                let prob = logistic(raw[i]);
                g[i] = prob - f64::from(y[i]);
                h[i] = (prob * (1.0 - prob)).max(1e-12);
            }
            let tree = Self::grow_tree(spec, &binned, &edges, &g, &h);
            for (r, row) in raw.iter_mut().zip(x) {
                *r += tree.eval(row);
            }
            trees.push(tree);
        }
        BoostedModel { init, trees, n_features: p }
    }

    fn find_split(
        spec: &ClassifierSpec,
        binned: &[Vec<u16>],
        edges: &[Vec<f64>],
        g: &[f64],
        h: &[f64],
        leaf: &LeafState,
    ) -> Option<(usize, usize, f64)> {
        let min_n = spec.gbdt_min_data_in_leaf;
        if leaf.rows.len() < 2 * min_n {
            return None;
        }
        let parent = leaf.g * leaf.g / (leaf.h + GBDT_L2);
        let mut best: Option<(usize, usize, f64)> = None;
        for (f, e) in edges.iter().enumerate() {
            if e.is_empty() {
                continue;
            }
            let nb = e.len() + 1;
            let mut hg = vec![0.0; nb];
            let mut hh = vec![0.0; nb];
            let mut hc = vec![0usize; nb];
            for &r in &leaf.rows {
                let b = binned[r][f] as usize;
                hg[b] += g[r];
                hh[b] += h[r];
                hc[b] += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
            for b in 0..nb - 1 {
                gl += hg[b];
                hl += hh[b];
                cl += hc[b];
                let cr = leaf.rows.len() - cl;
                if cl < min_n || cr < min_n {
                    continue;
                }
                let (gr, hr) = (leaf.g - gl, leaf.h - hl);
                if hl < GBDT_MIN_HESSIAN || hr < GBDT_MIN_HESSIAN {
                    continue;
                }
                let gain = gl * gl / (hl + GBDT_L2) + gr * gr / (hr + GBDT_L2) - parent;
                if gain > 1e-12 && best.map_or(true, |(_, _, bg)| gain > bg) {
                    best = Some((f, b, gain));
                }
            }
        }
        best
    }

    fn grow_tree(spec: &ClassifierSpec, binned: &[Vec<u16>], edges: &[Vec<f64>], g: &[f64], h: &[f64]) -> Tree {
        let rows: Vec<usize> = (0..g.len()).collect();
        let mut root = LeafState { g: g.iter().sum(), h: h.iter().sum(), rows, node: 0, split: None };
        root.split = Self::find_split(spec, binned, edges, g, h, &root);
        let mut nodes = vec![TreeNode::Leaf(0.0)];
        let mut leaves = vec![root];
        while leaves.len() < spec.gbdt_max_leaves {
            // Leaf-wise: expand the leaf with the largest gain; ties go to the earliest leaf.
            let mut pick: Option<(usize, f64)> = None;
            for (i, l) in leaves.iter().enumerate() {
                if let Some((_, _, gain)) = l.split {
                    if pick.map_or(true, |(_, best)| gain > best) {
                        pick = Some((i, gain));
                    }
                }
            }
            let Some((i, _)) = pick else { break };
            let leaf = leaves.swap_remove(i);
            let (f, b, _) = leaf.split.expect("picked leaf has a split");
            let (lr, rr): (Vec<usize>, Vec<usize>) = leaf.rows.iter().partition(|&&r| (binned[r][f] as usize) <= b);
            let left_id = nodes.len();
            nodes.push(TreeNode::Leaf(0.0));
            nodes.push(TreeNode::Leaf(0.0));
            nodes[leaf.node] = TreeNode::Split { feature: f, threshold: edges[f][b], left: left_id, right: left_id + 1 };
            for (child_rows, node) in [(lr, left_id), (rr, left_id + 1)] {
                let mut child = LeafState {
                    g: child_rows.iter().map(|&r| g[r]).sum(),
                    h: child_rows.iter().map(|&r| h[r]).sum(),
                    rows: child_rows,
                    node,
                    split: None,
                };
                child.split = Self::find_split(spec, binned, edges, g, h, &child);
                leaves.push(child);
            }
        }
        for l in &leaves {
            nodes[l.node] = TreeNode::Leaf(-spec.gbdt_learning_rate * l.g / (l.h + GBDT_L2));
        }
        Tree { nodes }
    }

    fn raw(&self, row: &[f64]) -> f64 {
        self.init + self.trees.iter().map(|t| t.eval(row)).sum::<f64>()
    }
}

/// Support-weighted classification metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn evaluate(y_true: &[u8], y_pred: &[u8]) -> Result<Metrics> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Data("evaluation needs equal, nonzero counts of labels and predictions".into()));
    }
    let n = y_true.len() as f64;
    let mut cm = [[0usize; 2]; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm[t.min(1) as usize][p.min(1) as usize] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..2 {
        let tp = cm[c][c];
        let support = cm[c][0] + cm[c][1];
        let predicted = cm[0][c] + cm[1][c];
        let pr = ratio(tp, predicted);
        let rc = ratio(tp, support);
        let f = if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 };
        let w = support as f64 / n;
        precision += w * pr;
        recall += w * rc;
        f1 += w * f;
    }
    Ok(Metrics { accuracy: (cm[0][0] + cm[1][1]) as f64 / n, precision, recall, f1 })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: Vec<String>,
    pub train: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Every participant tested exactly once, and never trained on in the
    /// same fold.
    pub fn validate(&self, participants: &[(String, Group)]) -> Result<()> {
        let all: BTreeSet<&str> = participants.iter().map(|(id, _)| id.as_str()).collect();
        let mut tested = BTreeSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            let test: BTreeSet<&str> = f.test.iter().map(String::as_str).collect();
            if let Some(id) = f.train.iter().find(|id| test.contains(id.as_str())) {
                return Err(Error::Data(format!("fold {i}: participant {id} is in both train and test")));
            }
            for id in &f.test {
                if !tested.insert(id.as_str()) {
                    return Err(Error::Data(format!("participant {id} is tested in more than one fold")));
                }
            }
            if let Some(id) = f.train.iter().chain(&f.test).find(|id| !all.contains(id.as_str())) {
                return Err(Error::Data(format!("fold {i}: unknown participant {id}")));
            }
        }
        if tested != all {
            return Err(Error::Data("fold plan does not test every participant".into()));
        }
        Ok(())
    }
}

/// Stratified group k-fold: each class is shuffled by `seed` and dealt
/// round-robin into the test sets.
pub fn make_fold_plan(participants: &[(String, Group)], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config("at least two folds are required".into()));
    }
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); n_folds];
    for (stream, group) in [Group::Patient, Group::Control].into_iter().enumerate() {
        let mut ids: Vec<&String> = participants.iter().filter(|(_, g)| *g == group).map(|(id, _)| id).collect();
        if ids.len() < n_folds {
            return Err(Error::Data(format!(
                "{} {group} participants cannot fill {n_folds} folds",
                ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            tests[i % n_folds].push(id.clone());
        }
    }
    let folds = tests
        .into_iter()
        .map(|test| {
            let train = participants.iter().map(|(id, _)| id).filter(|id| !test.contains(id)).cloned().collect();
            Fold { test, train }
        })
        .collect();
    let plan = FoldPlan { folds };
    plan.validate(participants)?;
    Ok(plan)
}

/// Participants of an epoch set in first-appearance order.
pub fn participants_of(set: &EpochSet) -> Vec<(String, Group)> {
    let mut out: Vec<(String, Group)> = Vec::new();
    for e in &set.epochs {
        if !out.iter().any(|(id, _)| *id == e.participant_id) {
            out.push((e.participant_id.clone(), e.group));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub mode: FeatureMode,
    pub k: usize,
    pub spec: ClassifierSpec,
}

impl CvConfig {
    pub fn new(mode: FeatureMode, kind: ClassifierKind) -> Self {
        CvConfig { mode, k: mode.default_k(), spec: ClassifierSpec::new(kind) }
    }
}

/// Everything one fold learned, kept for attribution and audits.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub test_participants: Vec<String>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub selected: Vec<usize>,
    pub scaler: Scaler,
    pub model: Model,
    pub y_true: Vec<u8>,
    pub y_pred: Vec<u8>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub features: FeatureMatrix,
    pub folds: Vec<FoldResult>,
    pub pooled: Metrics,
}

/// Fits one fold on the train rows only: ANOVA selection, then z-scoring of
/// the selected columns, then the classifier.
pub fn fit_fold(
    features: &FeatureMatrix,
    train_rows: &[usize],
    cfg: &CvConfig,
    seed: u64,
) -> Result<(Vec<usize>, Scaler, Model)> {
    let x: Vec<Vec<f64>> = train_rows.iter().map(|&r| features.x[r].clone()).collect();
    let y: Vec<u8> = train_rows.iter().map(|&r| features.y[r]).collect();
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::Data("training data contain a single class".into()));
    }
    let scores = anova_f_scores(&x, &y)?;
    let selected = select_k_best(&scores, cfg.k.min(features.n_cols()))?;
    let reduced = take_columns(&x, &selected);
    let scaler = Scaler::fit(&reduced)?;
    let model = fit(&cfg.spec.clone().with_seed(seed), &scaler.transform(&reduced), &y)?;
    Ok((selected, scaler, model))
}

pub fn cross_validate(set: &EpochSet, task: Task, cfg: &CvConfig, plan: &FoldPlan) -> Result<CvResult> {
    let features = build_features(set, task, cfg.mode)?;
    cross_validate_features(features, cfg, plan)
}

pub fn cross_validate_features(features: FeatureMatrix, cfg: &CvConfig, plan: &FoldPlan) -> Result<CvResult> {
    cfg.spec.validate()?;
    let folds = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| -> Result<FoldResult> {
            let train_rows = features.rows_of(fold.train.iter().map(String::as_str));
            let test_rows = features.rows_of(fold.test.iter().map(String::as_str));
            if test_rows.iter().any(|r| train_rows.contains(r))
                || train_rows.iter().any(|&r| fold.test.contains(&features.participant_ids[r]))
            {
                return Err(Error::Data(format!("fold {i}: train and test share a participant")));
            }
            if test_rows.is_empty() {
                return Err(Error::Data(format!("fold {i}: no test trials")));
            }
            let (selected, scaler, model) = fit_fold(&features, &train_rows, cfg, cfg.spec.seed ^ i as u64)
                .map_err(|e| Error::Data(format!("fold {i}: {e}")))?;
            let test_x: Vec<Vec<f64>> =
                test_rows.iter().map(|&r| scaler.transform_row(&take_columns(&[features.x[r].clone()], &selected)[0])).collect();
            let y_pred = model.predict(&test_x)?;
            let y_true: Vec<u8> = test_rows.iter().map(|&r| features.y[r]).collect();
            let metrics = evaluate(&y_true, &y_pred)?;
            Ok(FoldResult {
                fold: i,
                test_participants: fold.test.clone(),
                train_rows,
                test_rows,
                selected,
                scaler,
                model,
                y_true,
                y_pred,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_true: Vec<u8> = folds.iter().flat_map(|f| f.y_true.iter().copied()).collect();
    let all_pred: Vec<u8> = folds.iter().flat_map(|f| f.y_pred.iter().copied()).collect();
    let pooled = evaluate(&all_true, &all_pred)?;
    Ok(CvResult { features, folds, pooled })
}
