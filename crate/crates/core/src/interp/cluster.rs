// SPDX-License-Identifier: MIT OR Apache-2.0

//! Average-linkage agglomerative clustering of decoder directions by
//! cosine similarity, cut where the best remaining merge falls below τ.
//!
//! Equal similarities resolve toward the pair with the lowest feature ids
//! (each cluster is identified by its smallest member).

use std::fmt::Write as _;

use serde::Serialize;

use super::FeatureCatalog;
use crate::error::{MifinError, Result};
use crate::sae::SaeParams;

pub const DEFAULT_TAU: f64 = 0.65;

/// One merge of the dendrogram. Leaves are nodes `0..n`; merge `i`
/// creates node `n + i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub similarity: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cluster {
    pub id: usize,
    /// Ascending feature ids.
    pub members: Vec<usize>,
    /// Member labels, strongest feature first (filled from a catalog).
    pub top_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Clustering {
    pub tau: f64,
    /// Cluster id of each feature.
    pub assignment: Vec<usize>,
    /// Ordered by smallest member.
    pub clusters: Vec<Cluster>,
    pub merges: Vec<Merge>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(MifinError::InvalidParam(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

/// Cosine similarity matrix of the decoder columns, in f64.
pub(crate) fn column_similarities(params: &SaeParams) -> Vec<Vec<f64>> {
    let n = params.d_hid();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let v: Vec<f64> = params.w_dec.column(c).iter().map(|&x| x as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                v
            } else {
                v.into_iter().map(|x| x / norm).collect()
            }
        })
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

/// `a` beats `b` as a merge candidate: higher similarity, then lower ids.
fn better(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}

fn finish(
    n: usize,
    tau: f64,
    merges: Vec<Merge>,
    groups: Vec<Vec<usize>>,
    catalog: Option<&FeatureCatalog>,
) -> Clustering {
    let mut groups = groups;
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups.sort_by_key(|g| g[0]);
    let mut assignment = vec![0; n];
    let clusters = groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            for &m in &members {
                assignment[m] = id;
            }
            let top_labels = catalog
                .map(|c| {
                    let mut recs: Vec<_> = members.iter().filter_map(|&m| c.get(m)).collect();
                    recs.sort_by(|a, b| b.stats.max.total_cmp(&a.stats.max).then(a.feature.cmp(&b.feature)));
                    recs.into_iter().take(3).map(|r| r.label.clone()).collect()
                })
                .unwrap_or_default();
            Cluster {
                id,
                members,
                top_labels,
            }
        })
        .collect();
    Clustering {
        tau,
        assignment,
        clusters,
        merges,
    }
}

/// Cluster with a Lance–Williams similarity update and cached per-row
/// best partners.
pub fn cluster_features(params: &SaeParams, tau: f64, catalog: Option<&FeatureCatalog>) -> Result<Clustering> {
    check_tau(tau)?;
    let n = params.d_hid();
    let mut s = column_similarities(params);
    let mut alive = vec![true; n];
    let mut size = vec![1usize; n];
    let mut node: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    let best_of = |i: usize, s: &[Vec<f64>], alive: &[bool]| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if j != i && alive[j] && best.is_none_or(|(bs, _)| s[i][j] > bs) {
                best = Some((s[i][j], j));
            }
        }
        best
    };
    let mut best: Vec<Option<(f64, usize)>> = (0..n).map(|i| best_of(i, &s, &alive)).collect();
    let mut merges = Vec::new();
    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if let (true, Some((sim, j))) = (alive[i], best[i]) {
                let cand = (sim, i.min(j), i.max(j));
                if pick.is_none_or(|p| better(cand, p)) {
                    pick = Some(cand);
                }
            }
        }
        let Some((sim, a, b)) = pick else { break };
        if sim < tau {
            break;
        }
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if alive[k] && k != a && k != b {
                let v = (sa * s[a][k] + sb * s[b][k]) / (sa + sb);
                s[a][k] = v;
                s[k][a] = v;
            }
        }
        alive[b] = false;
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        merges.push(Merge {
            left: node[a],
            right: node[b],
            similarity: sim,
            size: size[a],
        });
        node[a] = n + merges.len() - 1;

        best[b] = None;
        best[a] = best_of(a, &s, &alive);
        for k in 0..n {
            if !alive[k] || k == a {
                continue;
            }
            match best[k] {
                Some((_, j)) if j == a || j == b => best[k] = best_of(k, &s, &alive),
                Some((bs, j)) => {
                    let v = s[k][a];
                    if v > bs || (v == bs && a < j) {
                        best[k] = Some((v, a));
                    }
                }
                None => best[k] = best_of(k, &s, &alive),
            }
        }
    }
    let groups = (0..n).filter(|&i| alive[i]).map(|i| members[i].clone()).collect();
    Ok(finish(n, tau, merges, groups, catalog))
}

impl Clustering {
    /// Clusters as sorted member lists, for comparing partitions.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        self.clusters.iter().map(|c| c.members.clone()).collect()
    }

    /// The dendrogram down to the cut, as a DOT digraph.
    pub fn to_dot(&self) -> String {
        let n = self.assignment.len();
        let mut out = String::from("digraph clusters {\n  rankdir=BT;\n  node [shape=box];\n");
        for c in &self.clusters {
            for &m in &c.members {
                let label = c.top_labels.first().map_or(String::new(), |l| format!("\\n{}", l.replace('"', "'")));
                let _ = writeln!(out, "  n{m} [label=\"f{m}{label}\"];");
            }
        }
        for (i, m) in self.merges.iter().enumerate() {
            let id = n + i;
            let _ = writeln!(out, "  n{id} [shape=ellipse,label=\"{:.3}\"];", m.similarity);
            let _ = writeln!(out, "  n{} -> n{id};\n  n{} -> n{id};", m.left, m.right);
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn params_from_columns(cols: &[Vec<f32>]) -> SaeParams {
        let d = cols[0].len();
        let w_dec = Matrix::from_fn(d, cols.len(), |r, c| cols[c][r]);
        SaeParams {
            w_enc: w_dec.transpose(),
            b: vec![0.0; cols.len()],
            w_dec,
        }
    }

    #[test]
    fn identical_columns_share_a_cluster() {
        let p = params_from_columns(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = cluster_features(&p, 0.5, None).unwrap();
        assert_eq!(c.partition(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn orthogonal_columns_stay_apart() {
        let p = params_from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let c = cluster_features(&p, 0.5, None).unwrap();
        assert_eq!(c.clusters.len(), 3);
        assert!(c.merges.is_empty());
    }

    #[test]
    fn invalid_tau_is_rejected() {
        let p = params_from_columns(&[vec![1.0]]);
        assert!(cluster_features(&p, 1.0, None).is_err());
        assert!(cluster_features(&p, 0.0, None).is_err());
    }

    #[test]
    fn dot_lists_every_merge() {
        let p = params_from_columns(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let c = cluster_features(&p, 0.5, None).unwrap();
        assert_eq!(c.merges.len(), 1);
        assert!(c.to_dot().contains("n0 -> n3"));
    }
}
