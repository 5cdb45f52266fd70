// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy CART against an exhaustive oracle on small integer datasets:
//! at every node all (feature, threshold) candidates are scored with
//! exact rational weighted Gini and the first strictly best kept.

use std::collections::BTreeMap;

use mifin_core::fin::{evaluate_f1, feature_importance, train_tree, tree_predict, FeatureDataset, Node, TreeParams};
use mifin_core::fin::Pooling;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, PartialEq)]
enum Oracle {
    Leaf(String),
    Split(usize, f64, Box<Oracle>, Box<Oracle>),
}

fn counts(rows: &[usize], y: &[String]) -> BTreeMap<String, i128> {
    let mut m = BTreeMap::new();
    for &r in rows {
        *m.entry(y[r].clone()).or_insert(0) += 1;
    }
    m
}

/// Σc² / n as a (num, den) pair.
fn purity(rows: &[usize], y: &[String]) -> (i128, i128) {
    let s: i128 = counts(rows, y).values().map(|c| c * c).sum();
    (s, rows.len() as i128)
}

fn majority(rows: &[usize], y: &[String]) -> String {
    let c = counts(rows, y);
    let max = *c.values().max().unwrap();
    c.into_iter().find(|(_, v)| *v == max).unwrap().0
}

fn grow(x: &[Vec<i32>], y: &[String], rows: Vec<usize>, depth: usize, p: &TreeParams) -> Oracle {
    if counts(&rows, y).len() <= 1 || depth >= p.max_depth {
        return Oracle::Leaf(majority(&rows, y));
    }
    let parent = purity(&rows, y);
    let mut best: Option<((i128, i128), usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<i32> = rows.iter().map(|&r| x[r][f]).collect();
        vals.sort_unstable();
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] as f64 + w[1] as f64) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| (x[i][f] as f64) <= t);
            if l.len() < p.min_samples_leaf || r.len() < p.min_samples_leaf {
                continue;
            }
            let (a, b) = (purity(&l, y), purity(&r, y));
            let s = (a.0 * b.1 + b.0 * a.1, a.1 * b.1);
            if best.as_ref().is_none_or(|(bs, _, _)| s.0 * bs.1 > bs.0 * s.1) {
                best = Some((s, f, t));
            }
        }
    }
    match best {
        Some((s, f, t)) if s.0 * parent.1 > parent.0 * s.1 => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| (x[i][f] as f64) <= t);
            Oracle::Split(
                f,
                t,
                Box::new(grow(x, y, l, depth + 1, p)),
                Box::new(grow(x, y, r, depth + 1, p)),
            )
        }
        _ => Oracle::Leaf(majority(&rows, y)),
    }
}

fn same(node: &Node, o: &Oracle) -> bool {
    match (node, o) {
        (Node::Leaf { label, .. }, Oracle::Leaf(l)) => label == l,
        (
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            },
            Oracle::Split(f, t, ol, or),
        ) => feature == f && threshold == t && same(left, ol) && same(right, or),
        _ => false,
    }
}

#[test]
fn greedy_tree_matches_exhaustive_oracle() {
    let labels = ["a", "b", "c"];
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=12);
        let k = rng.random_range(2..=3);
        let range = rng.random_range(2..=6);
        let x: Vec<Vec<i32>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0..range)).collect()).collect();
        let y: Vec<String> = (0..n).map(|_| labels[rng.random_range(0..k)].to_string()).collect();
        let params = TreeParams {
            max_depth: rng.random_range(1..=2),
            min_samples_leaf: rng.random_range(1..=2),
        };
        let data = FeatureDataset::new(
            x.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect(),
            y.clone(),
            Pooling::Max,
        )
        .unwrap();
        let tree = train_tree(&data, &params).unwrap();
        let oracle = grow(&x, &y, (0..n).collect(), 0, &params);
        assert!(same(&tree.root, &oracle), "seed {seed}: {:?} vs {oracle:?}", tree.root);
        assert!(tree.depth() <= params.max_depth);

        // F1 from the confusion matrix equals a direct per-row count.
        let report = evaluate_f1(&tree, &data).unwrap();
        let preds: Vec<&str> = data.x.iter().map(|r| tree_predict(&tree, r)).collect();
        for (label, f1) in &report.per_label {
            let tp = (0..n).filter(|&i| preds[i] == label && y[i] == *label).count() as f64;
            let fp = (0..n).filter(|&i| preds[i] == label && y[i] != *label).count() as f64;
            let fn_ = (0..n).filter(|&i| preds[i] != label && y[i] == *label).count() as f64;
            assert!((f1 - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
        }
        let imp = feature_importance(&tree);
        let used: Vec<usize> = collect_features(&tree.root);
        for (f, v) in imp.iter().enumerate() {
            if !used.contains(&f) {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

fn collect_features(n: &Node) -> Vec<usize> {
    match n {
        Node::Leaf { .. } => vec![],
        Node::Split { feature, left, right, .. } => {
            let mut v = vec![*feature];
            v.extend(collect_features(left));
            v.extend(collect_features(right));
            v
        }
    }
}
