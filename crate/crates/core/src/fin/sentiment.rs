// SPDX-License-Identifier: MIT OR Apache-2.0

//! Five-way sentiment classification by prompting, with optional steering,
//! scored into a confusion matrix.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::{GenerateParams, Intervention, ModelBundle, Positions};

pub const SENTIMENT_INSTRUCTION: &str = "Can you rate the following sentence as a sentiment, very positive, somewhat positive, neutral, somewhat negative, very negative";
/// Generated tokens the parser looks at.
pub const SENTIMENT_MAX_TOKENS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sentiment {
    VeryPositive,
    SomewhatPositive,
    Neutral,
    SomewhatNegative,
    VeryNegative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 5] = [
        Sentiment::VeryPositive,
        Sentiment::SomewhatPositive,
        Sentiment::Neutral,
        Sentiment::SomewhatNegative,
        Sentiment::VeryNegative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::VeryPositive => "very positive",
            Sentiment::SomewhatPositive => "somewhat positive",
            Sentiment::Neutral => "neutral",
            Sentiment::SomewhatNegative => "somewhat negative",
            Sentiment::VeryNegative => "very negative",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Sentiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = MifinError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
        Sentiment::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| MifinError::InvalidParam(format!("unknown sentiment label {s:?}")))
    }
}

/// Phrases the parser recognizes. The bare polarity words stand for the
/// extreme categories; longer phrases win where they overlap.
const PHRASES: [(&str, Sentiment); 7] = [
    ("very positive", Sentiment::VeryPositive),
    ("somewhat positive", Sentiment::SomewhatPositive),
    ("neutral", Sentiment::Neutral),
    ("somewhat negative", Sentiment::SomewhatNegative),
    ("very negative", Sentiment::VeryNegative),
    ("positive", Sentiment::VeryPositive),
    ("negative", Sentiment::VeryNegative),
];

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Leftmost match at word boundaries; at equal start the longest phrase.
pub fn parse_sentiment(generation: &str) -> Option<Sentiment> {
    let hay = generation.to_ascii_lowercase();
    let bytes = hay.as_bytes();
    let mut best: Option<(usize, usize, Sentiment)> = None;
    for (phrase, cat) in PHRASES {
        for (i, _) in hay.match_indices(phrase) {
            let end = i + phrase.len();
            let left_ok = i == 0 || !is_word_byte(bytes[i - 1]);
            let right_ok = end == bytes.len() || !is_word_byte(bytes[end]);
            if !(left_ok && right_ok) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, blen, _)) => i < bi || (i == bi && phrase.len() > blen),
            };
            if better {
                best = Some((i, phrase.len(), cat));
            }
            break;
        }
    }
    best.map(|(_, _, c)| c)
}

pub fn sentiment_prompt(text: &str) -> String {
    format!("{SENTIMENT_INSTRUCTION}.\nSentence: {}\nSentiment:", text.trim())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentExample {
    pub text: String,
    pub label: Sentiment,
}

impl SentimentExample {
    /// Read a `text,label` CSV whose labels are category names.
    pub fn read_csv(path: &Path) -> Result<Vec<Self>> {
        super::read_labeled_csv(path)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let label = r.label.parse().map_err(|_| MifinError::Record {
                    line: i + 2,
                    reason: format!("unknown sentiment label {:?}", r.label),
                })?;
                Ok(Self { text: r.text, label })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SentimentPrediction {
    pub text: String,
    pub truth: Sentiment,
    pub generation: String,
    pub predicted: Option<Sentiment>,
}

/// `counts[truth][predicted]` plus an unparsed count per truth label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 5]; 5],
    pub unparsed: [usize; 5],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: Sentiment, predicted: Option<Sentiment>) {
        match predicted {
            Some(p) => self.counts[truth.index()][p.index()] += 1,
            None => self.unparsed[truth.index()] += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.unparsed.iter().sum::<usize>()
    }

    pub fn correct(&self) -> usize {
        (0..5).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in Sentiment::ALL {
            let _ = write!(out, ",{c}");
        }
        out.push_str(",unparsed\n");
        for t in Sentiment::ALL {
            let _ = write!(out, "{t}");
            for n in self.counts[t.index()] {
                let _ = write!(out, ",{n}");
            }
            let _ = writeln!(out, ",{}", self.unparsed[t.index()]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SentimentEval {
    pub matrix: ConfusionMatrix,
    pub predictions: Vec<SentimentPrediction>,
}

/// Which sequence positions steering edits touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerScope {
    /// Prompt and generated tokens, on every decoding step.
    #[default]
    All,
    Prompt,
    Generated,
}

impl SteerScope {
    fn apply(self, interventions: &[Intervention], prompt_len: usize) -> Vec<Intervention> {
        let positions: Vec<usize> = match self {
            SteerScope::All => return interventions.to_vec(),
            SteerScope::Prompt => (0..prompt_len).collect(),
            SteerScope::Generated => (prompt_len..prompt_len + SENTIMENT_MAX_TOKENS).collect(),
        };
        interventions
            .iter()
            .map(|iv| Intervention {
                positions: Positions::Only(positions.clone()),
                ..iv.clone()
            })
            .collect()
    }
}

/// Greedy completion of the rating prompt, with `interventions` applied
/// on every decoding step. Returns the generation and its parse.
pub fn sentiment_classify(
    bundle: &ModelBundle,
    text: &str,
    interventions: &[Intervention],
    scope: SteerScope,
) -> Result<(String, Option<Sentiment>)> {
    let ids = bundle.encode(&sentiment_prompt(text));
    let room = bundle.config.context_len.saturating_sub(SENTIMENT_MAX_TOKENS);
    if ids.len() > room {
        return Err(MifinError::ContextLength {
            len: ids.len() + SENTIMENT_MAX_TOKENS,
            max: bundle.config.context_len,
        });
    }
    let params = GenerateParams::greedy(SENTIMENT_MAX_TOKENS).with_interventions(scope.apply(interventions, ids.len()));
    let generation = bundle.decode(&bundle.generate(&ids, &params)?.tokens)?;
    let parsed = parse_sentiment(&generation);
    Ok((generation, parsed))
}

pub fn sentiment_eval(
    bundle: &ModelBundle,
    dataset: &[SentimentExample],
    interventions: &[Intervention],
    scope: SteerScope,
) -> Result<SentimentEval> {
    let mut matrix = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let (generation, predicted) = sentiment_classify(bundle, &ex.text, interventions, scope)?;
        matrix.record(ex.label, predicted);
        predictions.push(SentimentPrediction {
            text: ex.text.clone(),
            truth: ex.label,
            generation,
            predicted,
        });
    }
    Ok(SentimentEval { matrix, predictions })
}
