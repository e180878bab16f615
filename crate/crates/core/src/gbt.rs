//! Gradient-boosted regression trees.
//!
//! Each round draws a row subsample without replacement, grows a CART tree
//! on the current working response (a fresh column subsample is drawn at
//! every split), evaluates the tree on the full training set and subtracts
//! `eta` times those fitted values from the working response. The predictor
//! is the sum over rounds of `eta` times each tree's output.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::LongFrame;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbHyperparams {
    /// Learning rate in `[0, 1]`.
    pub eta: f64,
    /// Number of boosting rounds.
    pub n_rounds: usize,
    /// Share of rows drawn per round, in `(0, 1]`.
    pub row_fraction: f64,
    /// Share of columns drawn per split, in `(0, 1]`.
    pub col_fraction: f64,
    /// `None` grows trees until another stopping rule applies.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for GbHyperparams {
    fn default() -> Self {
        Self {
            eta: 0.1,
            n_rounds: 100,
            row_fraction: 0.7,
            col_fraction: 0.8,
            max_depth: Some(3),
            min_leaf: 3,
        }
    }
}

impl GbHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} not in [0, 1]", self.eta));
        }
        if self.n_rounds == 0 {
            return bad("n_rounds must be >= 1".into());
        }
        if !(self.row_fraction > 0.0 && self.row_fraction <= 1.0) {
            return bad(format!("row_fraction {} not in (0, 1]", self.row_fraction));
        }
        if !(self.col_fraction > 0.0 && self.col_fraction <= 1.0) {
            return bad(format!("col_fraction {} not in (0, 1]", self.col_fraction));
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be >= 1".into());
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be >= 1".into());
        }
        Ok(())
    }
}

/// Tree node stored in a flat arena; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        n: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Route one row: left iff `x[feature] <= threshold`.
    pub fn predict_row(&self, row: impl Fn(usize) -> f64) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row(feature) <= threshold { left } else { right },
            }
        }
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value, .. } => Some(*value),
            Node::Split { .. } => None,
        })
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

/// Stopping rules and per-split column sampling for one tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Columns drawn (without replacement) at each split.
    pub cols_per_split: usize,
}

/// Best split of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    /// Reduction of the within-node sum of squares.
    pub gain: f64,
}

/// Exhaustive search over `features` (ascending) and midpoints between
/// consecutive distinct sorted values, minimising the children's total sum of
/// squared deviations. Ties keep the lowest feature, then the smallest
/// threshold.
pub fn best_split(
    x: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let base = total * total / n as f64;
    let mut best: Option<SplitChoice> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &j in features {
        let col = x.column(j);
        pairs.clear();
        pairs.extend(rows.iter().map(|&i| (col[i], y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for k in 1..n {
            left_sum += pairs[k - 1].1;
            if k < min_leaf || n - k < min_leaf {
                continue;
            }
            let (lo, hi) = (pairs[k - 1].0, pairs[k].0);
            if lo >= hi {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
            let gain = score - base;
            if best.is_none_or(|b| gain > b.gain) {
                let mid = 0.5 * (lo + hi);
                let threshold = if mid < hi { mid } else { lo };
                best = Some(SplitChoice {
                    feature: j,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// Grow one CART regression tree on `rows` of `(x, y)`.
///
/// A node becomes a leaf (value = mean response) when it reaches
/// `max_depth`, holds fewer than `2 * min_leaf` rows, has zero response
/// spread, or admits no split with both children of size `>= min_leaf`.
pub fn fit_tree(
    x: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    params: &TreeParams,
    rng: &mut StreamRng,
) -> Result<Tree> {
    if rows.is_empty() {
        return Err(Error::Fit("cannot fit a tree on zero rows".into()));
    }
    if x.ncols() == 0 {
        return Err(Error::Fit("cannot fit a tree without features".into()));
    }
    if y.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "response length {} vs {} rows",
            y.len(),
            x.nrows()
        )));
    }
    let p = x.ncols();
    let k = params.cols_per_split.clamp(1, p);
    let mut nodes = Vec::new();
    grow(x, y, rows.to_vec(), 0, params, k, rng, &mut nodes);
    Ok(Tree { nodes })
}

#[allow(clippy::too_many_arguments)]
fn grow(
    x: &DMatrix<f64>,
    y: &[f64],
    rows: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    k: usize,
    rng: &mut StreamRng,
    nodes: &mut Vec<Node>,
) -> usize {
    let at = nodes.len();
    let n = rows.len();
    let value = rows.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    nodes.push(Node::Leaf { value, n });

    let depth_left = params.max_depth.is_none_or(|d| depth < d);
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        (lo.min(y[i]), hi.max(y[i]))
    });
    if !depth_left || n < 2 * params.min_leaf || lo == hi {
        return at;
    }
    let p = x.ncols();
    let mut features: Vec<usize> = if k == p {
        (0..p).collect()
    } else {
        rand::seq::index::sample(rng, p, k).into_vec()
    };
    features.sort_unstable();
    let Some(split) = best_split(x, y, &rows, &features, params.min_leaf) else {
        return at;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| x[(i, split.feature)] <= split.threshold);
    let left = grow(x, y, left_rows, depth + 1, params, k, rng, nodes);
    let right = grow(x, y, right_rows, depth + 1, params, k, rng, nodes);
    nodes[at] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    at
}

/// Boosted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbModel {
    pub trees: Vec<Tree>,
    pub eta: f64,
    pub feature_names: Vec<String>,
}

/// `ceil(fraction * n)` clamped to `[1, n]`, snapping rounding noise.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * (n as f64).max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (count as usize).clamp(1, n.max(1))
}

/// Fit the boosted model. `feature_names` labels the columns of `x`.
pub fn fit_gb(
    x: &DMatrix<f64>,
    y: &[f64],
    feature_names: &[String],
    hp: &GbHyperparams,
    seed: u64,
) -> Result<GbModel> {
    hp.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Fit(format!("need at least 2 rows, found {n}")));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("response length {} vs {n} rows", y.len())));
    }
    if feature_names.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "{} feature names for {} columns",
            feature_names.len(),
            x.ncols()
        )));
    }
    let params = TreeParams {
        max_depth: hp.max_depth,
        min_leaf: hp.min_leaf,
        cols_per_split: fraction_count(hp.col_fraction, x.ncols()),
    };
    let n_sub = fraction_count(hp.row_fraction, n);
    let mut rng = rng::stream(seed, "gb-fit", &[]);
    let mut current = y.to_vec();
    let mut trees = Vec::with_capacity(hp.n_rounds);
    let all_rows: Vec<usize> = (0..n).collect();
    for _ in 0..hp.n_rounds {
        let rows = if n_sub == n {
            all_rows.clone()
        } else {
            let mut r = rand::seq::index::sample(&mut rng, n, n_sub).into_vec();
            r.sort_unstable();
            r
        };
        let tree = fit_tree(x, &current, &rows, &params, &mut rng)?;
        for (i, c) in current.iter_mut().enumerate() {
            *c -= hp.eta * tree.predict_row(|j| x[(i, j)]);
        }
        trees.push(tree);
    }
    Ok(GbModel {
        trees,
        eta: hp.eta,
        feature_names: feature_names.to_vec(),
    })
}

/// Sum over trees of `eta` times the leaf each row routes to.
pub fn predict_gb(model: &GbModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.feature_names.len() {
        return Err(Error::Shape(format!(
            "model expects {} features, got {}",
            model.feature_names.len(),
            x.ncols()
        )));
    }
    Ok((0..x.nrows())
        .map(|i| {
            model
                .trees
                .iter()
                .map(|t| model.eta * t.predict_row(|j| x[(i, j)]))
                .sum()
        })
        .collect())
}

/// Assign each row to a fold so that rows sharing a group label share a
/// fold. Groups are shuffled, then dealt round-robin.
pub fn fold_assignment(groups: &[usize], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("n_folds must be >= 2, got {n_folds}")));
    }
    let mut distinct: Vec<usize> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &g in groups {
        if seen.insert(g) {
            distinct.push(g);
        }
    }
    if distinct.len() < n_folds {
        return Err(Error::Design(format!(
            "{} groups cannot fill {n_folds} folds",
            distinct.len()
        )));
    }
    let mut rng = rng::stream(seed, "cv-folds", &[]);
    for i in (1..distinct.len()).rev() {
        let j = rng.random_range(0..=i);
        distinct.swap(i, j);
    }
    let fold_of: std::collections::HashMap<usize, usize> = distinct
        .iter()
        .enumerate()
        .map(|(k, &g)| (g, k % n_folds))
        .collect();
    Ok(groups.iter().map(|g| fold_of[g]).collect())
}

/// Result of a cross-validated search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best: GbHyperparams,
    pub best_index: usize,
    /// Mean held-out MSE per candidate, in candidate order.
    pub scores: Vec<f64>,
}

/// Pick the candidate with the smallest average held-out MSE over a K-fold
/// partition grouped by `groups`. Ties go to the earliest candidate.
pub fn tune_cv(
    x: &DMatrix<f64>,
    y: &[f64],
    groups: &[usize],
    feature_names: &[String],
    candidates: &[GbHyperparams],
    n_folds: usize,
    seed: u64,
) -> Result<CvOutcome> {
    if candidates.is_empty() {
        return Err(Error::Config("no hyperparameter candidates".into()));
    }
    if groups.len() != x.nrows() || y.len() != x.nrows() {
        return Err(Error::Shape("x, y and groups must have equal length".into()));
    }
    let folds = fold_assignment(groups, n_folds, seed)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..n_folds)
        .map(|f| (0..folds.len()).partition(|&i| folds[i] != f))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..n_folds).map(move |f| (c, f)))
        .collect();
    let mse = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (train, test) = &splits[f];
            let x_train = x.select_rows(train);
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fold_seed = rng::derive_seed(seed, "cv-fit", &[c as u64, f as u64]);
            let model = fit_gb(&x_train, &y_train, feature_names, &candidates[c], fold_seed)?;
            let pred = predict_gb(&model, &x.select_rows(test))?;
            Ok(test
                .iter()
                .zip(&pred)
                .map(|(&i, p)| (p - y[i]).powi(2))
                .sum::<f64>()
                / test.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let scores: Vec<f64> = mse
        .chunks(n_folds)
        .map(|c| c.iter().sum::<f64>() / n_folds as f64)
        .collect();
    let best_index = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if *s < scores[b] { i } else { b });
    Ok(CvOutcome {
        best: candidates[best_index].clone(),
        best_index,
        scores,
    })
}

/// Inclusive sampling ranges for random search. `eta` and `n_rounds` are
/// drawn log-uniformly, the rest uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub eta: [f64; 2],
    pub n_rounds: [usize; 2],
    pub row_fraction: [f64; 2],
    pub col_fraction: [f64; 2],
    pub max_depth: [usize; 2],
    pub min_leaf: [usize; 2],
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            eta: [0.02, 0.3],
            n_rounds: [50, 400],
            row_fraction: [0.6, 1.0],
            col_fraction: [0.6, 1.0],
            max_depth: [2, 5],
            min_leaf: [1, 8],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("search space: {m}")));
        let [e0, e1] = self.eta;
        if !(e0 > 0.0 && e0 <= e1 && e1 <= 1.0) {
            return err("eta needs 0 < lo <= hi <= 1");
        }
        let [r0, r1] = self.n_rounds;
        if !(r0 >= 1 && r0 <= r1) {
            return err("n_rounds needs 1 <= lo <= hi");
        }
        for (name, [a, b]) in [("row_fraction", self.row_fraction), ("col_fraction", self.col_fraction)] {
            if !(a > 0.0 && a <= b && b <= 1.0) {
                return err(&format!("{name} needs 0 < lo <= hi <= 1"));
            }
        }
        for (name, [a, b]) in [("max_depth", self.max_depth), ("min_leaf", self.min_leaf)] {
            if !(a >= 1 && a <= b) {
                return err(&format!("{name} needs 1 <= lo <= hi"));
            }
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
    }
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        (lo + u * (hi - lo)).clamp(lo, hi)
    }
}

/// Draw `n_candidates` hyperparameter sets from `space`.
pub fn random_search(space: &SearchSpace, n_candidates: usize, seed: u64) -> Result<Vec<GbHyperparams>> {
    space.validate()?;
    if n_candidates == 0 {
        return Err(Error::Config("n_candidates must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, "random-search", &[]);
    Ok((0..n_candidates)
        .map(|_| {
            let eta = log_uniform(&mut rng, space.eta[0], space.eta[1]);
            let rounds = log_uniform(&mut rng, space.n_rounds[0] as f64, space.n_rounds[1] as f64)
                .round() as usize;
            GbHyperparams {
                eta,
                n_rounds: rounds.clamp(space.n_rounds[0], space.n_rounds[1]),
                row_fraction: uniform(&mut rng, space.row_fraction[0], space.row_fraction[1]),
                col_fraction: uniform(&mut rng, space.col_fraction[0], space.col_fraction[1]),
                max_depth: Some(rng.random_range(space.max_depth[0]..=space.max_depth[1])),
                min_leaf: rng.random_range(space.min_leaf[0]..=space.min_leaf[1]),
            }
        })
        .collect())
}

/// Which frame attributes the boosted model sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbFeatures {
    /// Auxiliary columns; `None` uses every auxiliary of the frame.
    pub columns: Option<Vec<String>>,
    pub include_period: bool,
    pub one_hot_domain: bool,
}

impl Default for GbFeatures {
    fn default() -> Self {
        Self {
            columns: None,
            include_period: true,
            one_hot_domain: false,
        }
    }
}

impl GbFeatures {
    /// Feature matrix for every row of `frame`, with column names.
    pub fn matrix(&self, frame: &LongFrame) -> Result<(DMatrix<f64>, Vec<String>)> {
        let cols: Vec<usize> = match &self.columns {
            None => (0..frame.aux_names().len()).collect(),
            Some(names) => names
                .iter()
                .map(|n| frame.aux_index(n))
                .collect::<Result<_>>()?,
        };
        let mut names: Vec<String> = cols.iter().map(|&c| frame.aux_names()[c].clone()).collect();
        if self.include_period {
            names.push("period".into());
        }
        if self.one_hot_domain {
            names.extend(frame.domains().iter().map(|d| format!("domain={d}")));
        }
        if names.is_empty() {
            return Err(Error::Config("gradient boosting has no features".into()));
        }
        let n_aux = cols.len();
        let period_col = usize::from(self.include_period);
        let x = DMatrix::from_fn(frame.n_rows(), names.len(), |i, j| {
            let row = &frame.rows()[i];
            if j < n_aux {
                row.x[cols[j]]
            } else if j < n_aux + period_col {
                row.period as f64
            } else {
                f64::from(u8::from(frame.domain_of_row()[i] == j - n_aux - period_col))
            }
        });
        Ok((x, names))
    }
}
