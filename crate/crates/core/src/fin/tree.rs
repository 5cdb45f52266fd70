// SPDX-License-Identifier: MIT OR Apache-2.0

//! CART decision trees over pooled SAE features.
//!
//! Splits are `x[feature] <= threshold` (left) over midpoints of sorted
//! unique values, chosen by Gini gain. Gains are compared exactly as
//! rationals of integer counts, so ties resolve by (lower feature, lower
//! threshold) rather than by rounding noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pool_features, Pooling};
use crate::error::{MifinError, Result};
use crate::model::ModelBundle;
use crate::sae::Sae;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
}

/// Read a `text,label` CSV with a header row.
pub fn read_labeled_csv(path: &Path) -> Result<Vec<LabeledText>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MifinError::load(path, e))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| MifinError::load(path, format!("missing `{name}` column")))
    };
    let (ti, li) = (col("text")?, col("label")?);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |j: usize| {
            rec.get(j).map(str::to_string).ok_or_else(|| MifinError::Record {
                line: i + 2,
                reason: "short row".into(),
            })
        };
        out.push(LabeledText {
            text: get(ti)?,
            label: get(li)?.trim().to_string(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDataset {
    /// Declared label set, sorted.
    pub labels: Vec<String>,
    pub pooling: Pooling,
    pub x: Vec<Vec<f32>>,
    pub y: Vec<String>,
}

impl FeatureDataset {
    pub fn new(x: Vec<Vec<f32>>, y: Vec<String>, pooling: Pooling) -> Result<Self> {
        if x.len() != y.len() {
            return Err(MifinError::shape("dataset", format!("{} rows, {} labels", x.len(), y.len())));
        }
        if let Some(w) = x.first().map(Vec::len) {
            if x.iter().any(|r| r.len() != w) {
                return Err(MifinError::shape("dataset", "rows differ in width"));
            }
        }
        let labels: BTreeSet<String> = y.iter().cloned().collect();
        Ok(Self {
            labels: labels.into_iter().collect(),
            pooling,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            labels: self.labels.clone(),
            pooling: self.pooling,
            x: rows.iter().map(|&r| self.x[r].clone()).collect(),
            y: rows.iter().map(|&r| self.y[r].clone()).collect(),
        }
    }

    /// Seeded split into (train, test) with `test_fraction` of the rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Self, Self) {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let test = rows.split_off(self.len() - n_test.min(self.len()));
        (self.subset(&rows), self.subset(&test))
    }
}

pub fn build_feature_dataset(
    bundle: &ModelBundle,
    sae: &Sae,
    rows: &[LabeledText],
    pooling: Pooling,
) -> Result<FeatureDataset> {
    if rows.is_empty() {
        return Err(MifinError::EmptyDataset);
    }
    let x = rows
        .iter()
        .map(|r| pool_features(bundle, sae, &r.text, pooling))
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(x, rows.iter().map(|r| r.label.clone()).collect(), pooling)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 4,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        label: String,
        counts: BTreeMap<String, usize>,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Weighted Gini decrease `(n·G − n_l·G_l − n_r·G_r) / N`.
        gain: f64,
        samples: usize,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub labels: Vec<String>,
    pub n_features: usize,
    pub params: TreeParams,
    pub root: Node,
}

/// Sum of squared class counts over the node size: `Σ n_k² / n`, as a
/// rational. Maximizing `S_l + S_r` minimizes weighted child Gini.
#[derive(Clone, Copy, Debug)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn of(counts: &[u64], n: u64) -> Self {
        let sq: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
        Self { num: sq, den: n.max(1) as u128 }
    }

    fn add(self, o: Self) -> Self {
        Self {
            num: self.num * o.den + o.num * self.den,
            den: self.den * o.den,
        }
    }

    fn gt(self, o: Self) -> bool {
        self.num * o.den > o.num * self.den
    }
}

fn gini(counts: &[u64], n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a [Vec<f32>],
    y: Vec<usize>,
    labels: &'a [String],
    params: &'a TreeParams,
    total: usize,
}

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<u64> {
        let mut c = vec![0u64; self.labels.len()];
        for &r in rows {
            c[self.y[r]] += 1;
        }
        c
    }

    fn leaf(&self, rows: &[usize]) -> Node {
        let c = self.counts(rows);
        // Labels are sorted, so the first maximum is the smallest label.
        let best = (0..c.len()).fold(0, |b, k| if c[k] > c[b] { k } else { b });
        Node::Leaf {
            label: self.labels[best].clone(),
            counts: self
                .labels
                .iter()
                .zip(&c)
                .filter(|(_, &n)| n > 0)
                .map(|(l, &n)| (l.clone(), n as usize))
                .collect(),
        }
    }

    /// Best `(feature, threshold)` strictly improving on the parent.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64)> {
        let n = rows.len() as u64;
        let parent = Score::of(&self.counts(rows), n);
        let width = self.x.first().map_or(0, Vec::len);
        let k = self.labels.len();
        let mut best: Option<(Score, usize, f64)> = None;
        for f in 0..width {
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0u64; k];
            let mut right = self.counts(rows);
            for i in 0..order.len() - 1 {
                let r = order[i];
                left[self.y[r]] += 1;
                right[self.y[r]] -= 1;
                let (a, b) = (self.x[r][f], self.x[order[i + 1]][f]);
                if a == b {
                    continue;
                }
                let n_l = (i + 1) as u64;
                let n_r = n - n_l;
                if (n_l as usize) < self.params.min_samples_leaf || (n_r as usize) < self.params.min_samples_leaf {
                    continue;
                }
                let s = Score::of(&left, n_l).add(Score::of(&right, n_r));
                if best.as_ref().is_none_or(|(bs, _, _)| s.gt(*bs)) {
                    best = Some((s, f, (a as f64 + b as f64) / 2.0));
                }
            }
        }
        best.filter(|(s, _, _)| s.gt(parent)).map(|(_, f, t)| (f, t))
    }

    fn grow(&self, rows: Vec<usize>, depth: usize) -> Node {
        let c = self.counts(&rows);
        let pure = c.iter().filter(|&&v| v > 0).count() <= 1;
        if pure || depth >= self.params.max_depth || rows.len() < 2 {
            return self.leaf(&rows);
        }
        let Some((feature, threshold)) = self.best_split(&rows) else {
            return self.leaf(&rows);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] as f64 <= threshold);
        let n = rows.len() as u64;
        let (cl, cr) = (self.counts(&l), self.counts(&r));
        let gain = (n as f64 * gini(&c, n)
            - l.len() as f64 * gini(&cl, l.len() as u64)
            - r.len() as f64 * gini(&cr, r.len() as u64))
            / self.total as f64;
        Node::Split {
            feature,
            threshold,
            gain,
            samples: rows.len(),
            left: Box::new(self.grow(l, depth + 1)),
            right: Box::new(self.grow(r, depth + 1)),
        }
    }
}

pub fn train_tree(data: &FeatureDataset, params: &TreeParams) -> Result<DecisionTree> {
    if data.is_empty() {
        return Err(MifinError::EmptyDataset);
    }
    if params.min_samples_leaf == 0 {
        return Err(MifinError::InvalidParam("min_samples_leaf must be at least 1".into()));
    }
    let labels = data.labels.clone();
    let y = data
        .y
        .iter()
        .map(|l| labels.binary_search(l).map_err(|_| MifinError::InvalidParam(format!("undeclared label {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let b = Builder {
        x: &data.x,
        y,
        labels: &labels,
        params,
        total: data.len(),
    };
    let root = b.grow((0..data.len()).collect(), 0);
    Ok(DecisionTree {
        labels,
        n_features: data.width(),
        params: params.clone(),
        root,
    })
}

pub fn tree_predict<'t>(tree: &'t DecisionTree, x: &[f32]) -> &'t str {
    let mut node = &tree.root;
    loop {
        match node {
            Node::Leaf { label, .. } => return label,
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let v = x.get(*feature).copied().unwrap_or(0.0) as f64;
                node = if v <= *threshold { left } else { right };
            }
        }
    }
}

/// Total weighted Gini decrease per feature; unused features are 0.
pub fn feature_importance(tree: &DecisionTree) -> Vec<f64> {
    let mut out = vec![0.0; tree.n_features];
    fn walk(n: &Node, out: &mut [f64]) {
        if let Node::Split {
            feature,
            gain,
            left,
            right,
            ..
        } = n
        {
            out[*feature] += gain;
            walk(left, out);
            walk(right, out);
        }
    }
    walk(&tree.root, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Labels present in the truth or the predictions.
    pub per_label: BTreeMap<String, f64>,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub rows: usize,
}

pub fn evaluate_f1(tree: &DecisionTree, data: &FeatureDataset) -> Result<F1Report> {
    if data.is_empty() {
        return Err(MifinError::EmptyDataset);
    }
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut correct = 0;
    for (x, y) in data.x.iter().zip(&data.y) {
        let p = tree_predict(tree, x);
        correct += usize::from(p == y);
        *confusion.entry(y.clone()).or_default().entry(p.to_string()).or_default() += 1;
    }
    let mut labels: BTreeSet<String> = confusion.keys().cloned().collect();
    for row in confusion.values() {
        labels.extend(row.keys().cloned());
    }
    let cell = |t: &str, p: &str| confusion.get(t).and_then(|r| r.get(p)).copied().unwrap_or(0);
    let per_label: BTreeMap<String, f64> = labels
        .iter()
        .map(|l| {
            let tp = cell(l, l);
            let fp: usize = labels.iter().filter(|t| *t != l).map(|t| cell(t, l)).sum();
            let fn_: usize = labels.iter().filter(|p| *p != l).map(|p| cell(l, p)).sum();
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            (l.clone(), f1)
        })
        .collect();
    let macro_f1 = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(F1Report {
        macro_f1,
        accuracy: correct as f64 / data.len() as f64,
        per_label,
        confusion,
        rows: data.len(),
    })
}

impl DecisionTree {
    pub fn depth(&self) -> usize {
        fn d(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + d(left).max(d(right)),
            }
        }
        d(&self.root)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph tree {\n  node [shape=box];\n");
        fn walk(n: &Node, id: &mut usize, out: &mut String) -> usize {
            let me = *id;
            *id += 1;
            match n {
                Node::Leaf { label, counts } => {
                    let c: Vec<String> = counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
                    let _ = writeln!(out, "  n{me} [label=\"{}\\n{}\"];", label.replace('"', "'"), c.join(" "));
                }
                Node::Split {
                    feature,
                    threshold,
                    samples,
                    left,
                    right,
                    ..
                } => {
                    let _ = writeln!(out, "  n{me} [label=\"f{feature} <= {threshold:.4}\\nn={samples}\"];");
                    let l = walk(left, id, out);
                    let r = walk(right, id, out);
                    let _ = writeln!(out, "  n{me} -> n{l} [label=\"yes\"];\n  n{me} -> n{r} [label=\"no\"];");
                }
            }
            me
        }
        walk(&self.root, &mut 0, &mut out);
        out.push_str("}\n");
        out
    }
}
