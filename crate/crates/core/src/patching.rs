// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching and resample ablation.
//!
//! For a prompt pair the metric is `LD = logit[correct] − logit[incorrect]`
//! at the final position. A site's score is
//! `(LD_patched − LD_corrupted) / (LD_clean − LD_corrupted)`: 0 means the
//! patch changed nothing, 1 means it restored the clean behaviour.
//!
//! The default direction copies clean activations into the corrupted run
//! (denoising). `Noising` copies corrupted activations into the clean run;
//! it is scored with the same formula, so 1 still means "clean level".

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::{
    ActivationCache, Capture, HookPoint, Intervention, ModelBundle, PassOptions, Payload,
    Positions, Start,
};
use crate::tensor::Matrix;

/// Pairs whose clean and corrupted logit differences are closer than this
/// have no usable normalization.
pub const DEGENERATE_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: String,
    pub corrupted: String,
    pub correct: String,
    pub incorrect: String,
}

/// A pair that passed validation, with its encodings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub pair: PromptPair,
    pub clean_ids: Vec<u32>,
    pub corrupted_ids: Vec<u32>,
    pub correct_id: u32,
    pub incorrect_id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RejectedPair {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct PairSet {
    pub pairs: Vec<TokenizedPair>,
    pub rejected: Vec<RejectedPair>,
}

impl PromptPair {
    pub fn tokenize(&self, bundle: &ModelBundle) -> Result<TokenizedPair> {
        let clean_ids = bundle.encode(&self.clean);
        let corrupted_ids = bundle.encode(&self.corrupted);
        if clean_ids.len() != corrupted_ids.len() {
            return Err(MifinError::PairLength {
                clean: clean_ids.len(),
                corrupted: corrupted_ids.len(),
            });
        }
        if clean_ids.is_empty() {
            return Err(MifinError::EmptyInput);
        }
        if clean_ids.len() > bundle.config.context_len {
            return Err(MifinError::ContextLength {
                len: clean_ids.len(),
                max: bundle.config.context_len,
            });
        }
        Ok(TokenizedPair {
            correct_id: bundle.single_token(&self.correct)?,
            incorrect_id: bundle.single_token(&self.incorrect)?,
            pair: self.clone(),
            clean_ids,
            corrupted_ids,
        })
    }
}

/// Validate pairs, collecting rejections instead of failing on them.
pub fn validate_pairs(bundle: &ModelBundle, pairs: &[PromptPair]) -> PairSet {
    let mut set = PairSet {
        pairs: Vec::new(),
        rejected: Vec::new(),
    };
    for (i, p) in pairs.iter().enumerate() {
        match p.tokenize(bundle) {
            Ok(t) => set.pairs.push(t),
            Err(e) => {
                tracing::warn!(line = i + 1, error = %e, "skipping prompt pair");
                set.rejected.push(RejectedPair {
                    line: i + 1,
                    reason: e.to_string(),
                });
            }
        }
    }
    set
}

/// Read a JSON-lines corpus of `{clean, corrupted, correct, incorrect}`.
pub fn load_pairs(bundle: &ModelBundle, path: &Path) -> Result<PairSet> {
    let f = File::open(path).map_err(|e| MifinError::load(path, e))?;
    parse_pairs(bundle, BufReader::new(f))
}

/// As [`load_pairs`], from any line source. Rejections keep 1-based line
/// numbers.
pub fn parse_pairs(bundle: &ModelBundle, reader: impl BufRead) -> Result<PairSet> {
    let mut parsed = Vec::new();
    let mut rejected = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PromptPair>(&line) {
            Ok(p) => {
                parsed.push(p);
                lines.push(i + 1);
            }
            Err(e) => rejected.push(RejectedPair {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    if parsed.is_empty() && rejected.is_empty() {
        return Err(MifinError::EmptyCorpus);
    }
    let mut set = validate_pairs(bundle, &parsed);
    for r in &mut set.rejected {
        r.line = lines[r.line - 1];
    }
    set.rejected.extend(rejected);
    set.rejected.sort_by_key(|r| r.line);
    Ok(set)
}

/// Built-in pair corpora: `finance-pairs` (one scenario word substituted) and
/// `finance-pairs-embedded` (the prompt repeated after a completed statement
/// whose final answer word differs).
pub fn builtin_pairs(id: &str) -> Option<&'static str> {
    match id {
        "finance-pairs" => Some(include_str!("../fixtures/finance_pairs.jsonl")),
        "finance-pairs-embedded" => Some(include_str!("../fixtures/finance_pairs_embedded.jsonl")),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Full `attn_z` of one head, all positions.
    LayerHead,
    /// `resid_post` at one (layer, position).
    LayerPosition,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Denoising,
    Noising,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairScores {
    pub line_index: usize,
    pub ld_clean: f32,
    pub ld_corrupted: f32,
    /// `None` when the pair is degenerate and excluded.
    pub scores: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchMatrix {
    pub granularity: Granularity,
    pub direction: Direction,
    /// Mean over included pairs; `scores[layer][head_or_position]`.
    pub scores: Vec<Vec<f32>>,
    /// Number of included pairs contributing to each cell.
    pub counts: Vec<Vec<usize>>,
    pub pairs: Vec<PairScores>,
    pub excluded: Vec<usize>,
}

/// `(LD_patched − LD_corrupted) / (LD_clean − LD_corrupted)`.
pub fn normalized_score(ld_patched: f32, ld_clean: f32, ld_corrupted: f32) -> f32 {
    (ld_patched - ld_corrupted) / (ld_clean - ld_corrupted)
}

fn logit_diff(logits: &Matrix, correct: u32, incorrect: u32) -> f32 {
    let row = logits.row(logits.rows() - 1);
    row[correct as usize] - row[incorrect as usize]
}

/// Clean run, corrupted baseline, and their caches for one pair.
pub struct PairRuns<'a> {
    bundle: &'a ModelBundle,
    pair: &'a TokenizedPair,
    direction: Direction,
    /// Activations patched in (from the clean run when denoising).
    source: ActivationCache,
    /// Residual stream of the run being patched, for resuming mid-model.
    base: ActivationCache,
    pub ld_clean: f32,
    pub ld_corrupted: f32,
}

impl<'a> PairRuns<'a> {
    pub fn new(
        bundle: &'a ModelBundle,
        pair: &'a TokenizedPair,
        direction: Direction,
        source_capture: &Capture,
    ) -> Result<Self> {
        let resid = Capture::resid_post_all(bundle.config.n_layers);
        let both = Capture::of(source_capture.hooks().copied().chain(resid.hooks().copied()));
        let (clean_logits, clean_cache) = bundle.forward(&pair.clean_ids, &both)?;
        let (corr_logits, corr_cache) = bundle.forward(&pair.corrupted_ids, &both)?;
        let ld_clean = logit_diff(&clean_logits, pair.correct_id, pair.incorrect_id);
        let ld_corrupted = logit_diff(&corr_logits, pair.correct_id, pair.incorrect_id);
        let (source, base) = match direction {
            Direction::Denoising => (clean_cache, corr_cache),
            Direction::Noising => (corr_cache, clean_cache),
        };
        Ok(Self {
            bundle,
            pair,
            direction,
            source,
            base,
            ld_clean,
            ld_corrupted,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        (self.ld_clean - self.ld_corrupted).abs() < DEGENERATE_EPS
    }

    fn base_tokens(&self) -> &[u32] {
        match self.direction {
            Direction::Denoising => &self.pair.corrupted_ids,
            Direction::Noising => &self.pair.clean_ids,
        }
    }

    /// Score of patching the source activation at each `(hook, positions)`
    /// into the base run. An empty list scores the base run itself.
    pub fn score(&self, sites: &[(HookPoint, Positions)]) -> Result<f32> {
        let mut interventions = Vec::with_capacity(sites.len());
        // Layers before the earliest patched site are identical to the base
        // run, so resume from its cached residual.
        let mut first_layer = if sites.is_empty() { 0 } else { usize::MAX };
        for (hook, positions) in sites {
            let act = self.source.require(hook)?;
            let rows = match positions {
                Positions::All => act.clone(),
                Positions::Only(list) => act.select_rows(list),
            };
            interventions.push(Intervention::replace(
                *hook,
                Payload::Rows(rows),
                positions.clone(),
            ));
            first_layer = first_layer.min(hook.layer().unwrap_or(0));
        }
        let start = if first_layer == 0 {
            Start::Tokens
        } else {
            Start::Residual {
                layer: first_layer,
                resid: self.base.require(&HookPoint::ResidPost(first_layer - 1))?,
            }
        };
        let (logits, _) = self.bundle.run(
            self.base_tokens(),
            start,
            &interventions,
            &Capture::none(),
            &PassOptions {
                last_logits_only: true,
            },
        )?;
        let ld = logit_diff(&logits, self.pair.correct_id, self.pair.incorrect_id);
        Ok(normalized_score(ld, self.ld_clean, self.ld_corrupted))
    }
}

fn sites_for(
    bundle: &ModelBundle,
    granularity: Granularity,
    n_pos: usize,
) -> Vec<Vec<(HookPoint, Positions)>> {
    let cfg = &bundle.config;
    (0..cfg.n_layers)
        .map(|layer| match granularity {
            Granularity::LayerHead => (0..cfg.n_heads)
                .map(|head| (HookPoint::AttnZ { layer, head }, Positions::All))
                .collect(),
            Granularity::LayerPosition => (0..n_pos)
                .map(|p| (HookPoint::ResidPost(layer), Positions::Only(vec![p])))
                .collect(),
        })
        .collect()
}

/// Score every site of the given granularity, averaged over pairs.
///
/// For `LayerPosition`, pairs may differ in length; cell `(l, p)` averages
/// over the pairs that have position `p`.
pub fn patch_scan(
    bundle: &ModelBundle,
    pairs: &[TokenizedPair],
    granularity: Granularity,
    direction: Direction,
) -> Result<PatchMatrix> {
    if pairs.is_empty() {
        return Err(MifinError::EmptyCorpus);
    }
    let cfg = &bundle.config;
    let capture = match granularity {
        Granularity::LayerHead => Capture::attn_z_all(cfg),
        Granularity::LayerPosition => Capture::none(),
    };
    let width = match granularity {
        Granularity::LayerHead => cfg.n_heads,
        Granularity::LayerPosition => pairs.iter().map(|p| p.clean_ids.len()).max().unwrap_or(0),
    };
    let mut sums = vec![vec![0.0f64; width]; cfg.n_layers];
    let mut counts = vec![vec![0usize; width]; cfg.n_layers];
    let mut results = Vec::with_capacity(pairs.len());
    let mut excluded = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let runs = PairRuns::new(bundle, pair, direction, &capture)?;
        if runs.is_degenerate() {
            tracing::warn!(pair = i, "excluding degenerate pair (LD_clean == LD_corrupted)");
            excluded.push(i);
            results.push(PairScores {
                line_index: i,
                ld_clean: runs.ld_clean,
                ld_corrupted: runs.ld_corrupted,
                scores: None,
            });
            continue;
        }
        let mut scores = Vec::with_capacity(cfg.n_layers);
        for (l, layer_sites) in sites_for(bundle, granularity, pair.clean_ids.len())
            .into_iter()
            .enumerate()
        {
            let mut row = Vec::with_capacity(layer_sites.len());
            for (c, site) in layer_sites.into_iter().enumerate() {
                let s = runs.score(&[site])?;
                sums[l][c] += s as f64;
                counts[l][c] += 1;
                row.push(s);
            }
            scores.push(row);
        }
        results.push(PairScores {
            line_index: i,
            ld_clean: runs.ld_clean,
            ld_corrupted: runs.ld_corrupted,
            scores: Some(scores),
        });
    }
    if excluded.len() == pairs.len() {
        return Err(MifinError::DegenerateCorpus);
    }
    let scores = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            s.iter()
                .zip(c)
                .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
                .collect()
        })
        .collect();
    Ok(PatchMatrix {
        granularity,
        direction,
        scores,
        counts,
        pairs: results,
        excluded,
    })
}

impl PatchMatrix {
    /// Cells sorted by descending score: `(layer, column, score)`.
    pub fn ranked(&self) -> Vec<(usize, usize, f32)> {
        let mut cells: Vec<_> = self
            .scores
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(c, &s)| (l, c, s)))
            .collect();
        cells.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        cells
    }

    /// Rows are layers; columns are heads or positions.
    pub fn to_csv(&self) -> String {
        let cols = self.scores.first().map_or(0, Vec::len);
        let label = match self.granularity {
            Granularity::LayerHead => "head",
            Granularity::LayerPosition => "pos",
        };
        let mut out = String::from("layer");
        for c in 0..cols {
            out.push_str(&format!(",{label}{c}"));
        }
        out.push('\n');
        for (l, row) in self.scores.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    /// Diverging shading: `-` marks for negative scores, `+` for positive,
    /// three intensity bins each.
    pub fn render_ascii(&self) -> String {
        let max = self
            .scores
            .iter()
            .flatten()
            .fold(0.0f32, |m, v| m.max(v.abs()))
            .max(f32::MIN_POSITIVE);
        let mut out = String::from("      ");
        let cols = self.scores.first().map_or(0, Vec::len);
        for c in 0..cols {
            out.push_str(&format!("{c:>4}"));
        }
        out.push('\n');
        for (l, row) in self.scores.iter().enumerate() {
            out.push_str(&format!("L{l:<4} "));
            for v in row {
                let level = ((v.abs() / max) * 3.0).ceil() as usize;
                let glyph = match (v.is_sign_negative(), level.min(3)) {
                    (_, 0) => "   .",
                    (false, 1) => "   +",
                    (false, 2) => "  ++",
                    (false, _) => " +++",
                    (true, 1) => "   -",
                    (true, 2) => "  --",
                    (true, _) => " ---",
                };
                out.push_str(glyph);
            }
            out.push('\n');
        }
        out
    }
}

/// The permutation used by [`resample_ablation`] for `n` positions.
pub fn resample_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub hook: HookPoint,
    pub permutation: Vec<usize>,
    pub metric_clean: f32,
    pub metric_ablated: f32,
    /// `metric_ablated − metric_clean`.
    pub delta_metric: f32,
}

/// Replace the hook's activation with a copy whose rows are shuffled across
/// positions, and measure the change in `logit[a] − logit[b]` at the final
/// position.
pub fn resample_ablation(
    bundle: &ModelBundle,
    tokens: &[u32],
    hook: HookPoint,
    seed: u64,
    metric: (u32, u32),
) -> Result<AblationResult> {
    hook.validate(&bundle.config)?;
    if tokens.len() < 2 {
        return Err(MifinError::AblationDegenerate);
    }
    let (logits, cache) = bundle.forward(tokens, &Capture::of([hook]))?;
    let metric_clean = logit_diff(&logits, metric.0, metric.1);
    let permutation = resample_permutation(tokens.len(), seed);
    let shuffled = cache.require(&hook)?.select_rows(&permutation);
    let iv = Intervention::replace(hook, Payload::Rows(shuffled), Positions::All);
    let (ablated, _) = bundle.forward_with_interventions(tokens, &[iv], &Capture::none())?;
    let metric_ablated = logit_diff(&ablated, metric.0, metric.1);
    Ok(AblationResult {
        hook,
        permutation,
        metric_clean,
        metric_ablated,
        delta_metric: metric_ablated - metric_clean,
    })
}
