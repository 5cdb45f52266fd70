// SPDX-License-Identifier: MIT OR Apache-2.0

//! Understanding SAE features: top activations, labels from an external
//! model or from the model itself, label search, and decoder clustering.

mod cluster;
mod label;
mod self_interp;
mod top;

pub use cluster::{cluster_features, Cluster, Clustering, Merge, DEFAULT_TAU};
pub use label::{auto_label, build_label_prompt, LabelOutcome, LabelerConfig, LABEL_PROMPT_VERSION};
pub use self_interp::{self_interpret, self_interpret_prompt, SelfInterpretParams, SelfInterpretation};
pub use top::{feature_activations, top_activations, TopActivation};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::sae::Sae;
use crate::store::ActivationStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Auto,
    #[serde(rename = "self")]
    SelfInterp,
    Manual,
    Placeholder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub max: f32,
    pub mean: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature: usize,
    pub label: String,
    pub source: LabelSource,
    pub stats: ActivationStats,
    #[serde(default)]
    pub cluster: Option<usize>,
}

pub fn placeholder_label(feature: usize) -> String {
    format!("feature-{feature}")
}

impl FeatureRecord {
    pub fn placeholder(feature: usize) -> Self {
        Self {
            feature,
            label: placeholder_label(feature),
            source: LabelSource::Placeholder,
            stats: ActivationStats::default(),
            cluster: None,
        }
    }
}

/// Lower-cased alphanumeric words.
pub fn label_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Per-feature labels for one SAE checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    pub sae_hash: String,
    pub records: Vec<FeatureRecord>,
    /// word → features whose label contains it.
    #[serde(skip)]
    index: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchHit {
    pub feature: usize,
    pub label: String,
    /// Distinct query words present in the label.
    pub overlap: usize,
    /// Overlap over the union of query and label words.
    pub jaccard: f64,
}

impl FeatureCatalog {
    /// Placeholder records with activation statistics from `store`.
    pub fn new(sae: &Sae, store: Option<&ActivationStore>) -> Result<Self> {
        let stats = match store {
            Some(s) => top::activation_stats(sae, s)?,
            None => vec![ActivationStats::default(); sae.d_hid()],
        };
        let records = stats
            .into_iter()
            .enumerate()
            .map(|(f, stats)| FeatureRecord {
                stats,
                ..FeatureRecord::placeholder(f)
            })
            .collect();
        Ok(Self::from_records(sae.hash().to_string(), records))
    }

    pub fn from_records(sae_hash: String, mut records: Vec<FeatureRecord>) -> Self {
        records.sort_by_key(|r| r.feature);
        records.dedup_by_key(|r| r.feature);
        let mut c = Self {
            sae_hash,
            records,
            index: BTreeMap::new(),
        };
        c.reindex();
        c
    }

    fn reindex(&mut self) {
        self.index.clear();
        for r in &self.records {
            if r.source == LabelSource::Placeholder {
                continue;
            }
            for w in label_tokens(&r.label) {
                self.index.entry(w).or_default().push(r.feature);
            }
        }
    }

    pub fn get(&self, feature: usize) -> Option<&FeatureRecord> {
        self.records
            .binary_search_by_key(&feature, |r| r.feature)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Replace a record's label; an empty label reverts to the placeholder.
    pub fn set_label(&mut self, feature: usize, label: &str, source: LabelSource) -> Result<()> {
        let i = self
            .records
            .binary_search_by_key(&feature, |r| r.feature)
            .map_err(|_| MifinError::FeatureId {
                feature,
                d_hid: self.records.len(),
            })?;
        let r = &mut self.records[i];
        let label = label.trim();
        if label.is_empty() || source == LabelSource::Placeholder {
            r.label = placeholder_label(feature);
            r.source = LabelSource::Placeholder;
        } else {
            r.label = label.to_string();
            r.source = source;
        }
        self.reindex();
        Ok(())
    }

    pub fn set_clusters(&mut self, clustering: &Clustering) {
        for r in &mut self.records {
            r.cluster = clustering.assignment.get(r.feature).copied();
        }
    }

    /// Case-insensitive word-overlap ranking over non-placeholder labels:
    /// overlap descending, then Jaccard descending, then feature id.
    pub fn search(&self, query: &str) -> Result<Vec<SearchHit>> {
        let q = label_tokens(query);
        if q.is_empty() {
            return Err(MifinError::EmptyQuery);
        }
        let mut candidates: BTreeSet<usize> = BTreeSet::new();
        for w in &q {
            if let Some(fs) = self.index.get(w) {
                candidates.extend(fs);
            }
        }
        let mut hits: Vec<SearchHit> = candidates
            .into_iter()
            .filter_map(|f| self.get(f))
            .map(|r| {
                let words = label_tokens(&r.label);
                let overlap = q.intersection(&words).count();
                let union = q.union(&words).count();
                SearchHit {
                    feature: r.feature,
                    label: r.label.clone(),
                    overlap,
                    jaccard: overlap as f64 / union as f64,
                }
            })
            .collect();
        hits.sort_by(|a, b| {
            b.overlap
                .cmp(&a.overlap)
                .then(b.jaccard.total_cmp(&a.jaccard))
                .then(a.feature.cmp(&b.feature))
        });
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load and check the catalog belongs to `sae`.
    pub fn load(path: &Path, sae: Option<&Sae>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MifinError::load(path, e))?;
        let c: FeatureCatalog = serde_json::from_str(&text)?;
        if let Some(s) = sae {
            if s.hash() != c.sae_hash {
                return Err(MifinError::CatalogMismatch {
                    expected: c.sae_hash,
                    found: s.hash().to_string(),
                });
            }
        }
        Ok(Self::from_records(c.sae_hash, c.records))
    }
}

/// `search` over a catalog, as a free function.
pub fn search_features(catalog: &FeatureCatalog, query: &str) -> Result<Vec<SearchHit>> {
    catalog.search(query)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(labels: &[&str]) -> FeatureCatalog {
        let records = labels
            .iter()
            .enumerate()
            .map(|(f, l)| FeatureRecord {
                label: l.to_string(),
                source: LabelSource::Manual,
                ..FeatureRecord::placeholder(f)
            })
            .collect();
        FeatureCatalog::from_records("h".into(), records)
    }

    #[test]
    fn exact_label_ranks_first() {
        let c = catalog(&["credit risk and default exposure", "credit risk", "interest rates"]);
        let hits = c.search("Credit Risk").unwrap();
        assert_eq!(hits[0].feature, 1);
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn no_overlap_gives_no_hits() {
        let c = catalog(&["references to London", "stock prices"]);
        assert!(c.search("weather").unwrap().is_empty());
        assert!(matches!(c.search("  ?! "), Err(MifinError::EmptyQuery)));
    }

    #[test]
    fn placeholder_labels_are_not_searchable() {
        let mut c = catalog(&["x"]);
        c.set_label(0, "", LabelSource::Auto).unwrap();
        assert_eq!(c.get(0).unwrap().source, LabelSource::Placeholder);
        assert!(c.search("feature").unwrap().is_empty());
    }

    #[test]
    fn catalog_round_trips() {
        let c = catalog(&["credit risk", "gender bias awareness"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.json");
        c.save(&p).unwrap();
        let back = FeatureCatalog::load(&p, None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.search("bias").unwrap()[0].feature, 1);
    }
}
