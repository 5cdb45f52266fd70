// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature labels from an external chat-completion endpoint.
//!
//! The request is `POST <url>` with `{"model"?, "messages": [{role,
//! content}]}`; the response must carry the label as `content` (a bare
//! `{"content": …}` or the common `choices[0].message.content` shape).
//! Any failure leaves a placeholder label.

use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use super::{placeholder_label, LabelSource, TopActivation};

/// Bumped whenever the prompt below changes.
pub const LABEL_PROMPT_VERSION: &str = "mifin-label-v1";

const SYSTEM_PROMPT: &str = "You label features of a language model's internal representation. \
Given text excerpts where one feature is active, reply with a short noun phrase \
(at most eight words) naming what the feature responds to, e.g. \"references to London\". \
Reply with the phrase only.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelerConfig {
    pub url: Option<String>,
    pub token: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
    /// Attempts after the first one.
    pub retries: u32,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            url: None,
            token: None,
            model: None,
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }
}

impl LabelerConfig {
    /// `MIFIN_LABELER_URL` and `MIFIN_LABELER_TOKEN`.
    pub fn from_env() -> Self {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        Self {
            url: get("MIFIN_LABELER_URL"),
            token: get("MIFIN_LABELER_TOKEN"),
            model: get("MIFIN_LABELER_MODEL"),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelOutcome {
    pub feature: usize,
    pub label: String,
    pub source: LabelSource,
    pub attempts: u32,
    pub error: Option<String>,
    pub prompt_version: &'static str,
}

/// The user message: each context on one line with the active tokens
/// wrapped as `[[token]]` and the activation appended.
pub fn build_label_prompt(feature: usize, contexts: &[TopActivation]) -> String {
    let mut out = format!("Feature {feature}. Excerpts where it is active, strongest first:\n\n");
    for (i, c) in contexts.iter().enumerate() {
        let mut line = String::new();
        for (j, &a) in c.token_activations.iter().enumerate() {
            let text = c
                .token_texts
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("<{}>", c.tokens.get(j).copied().unwrap_or(0)));
            if a > 0.0 {
                let _ = write!(line, "[[{text}]]");
            } else {
                line.push_str(&text);
            }
        }
        let _ = writeln!(out, "{}. {} (max activation {:.3})", i + 1, line.replace('\n', " "), c.activation);
    }
    out.push_str("\nWhat does this feature respond to?");
    out
}

fn extract_content(v: &Value) -> Option<String> {
    let s = v
        .get("content")
        .and_then(Value::as_str)
        .or_else(|| v.pointer("/choices/0/message/content").and_then(Value::as_str))?;
    let s = s.trim().trim_matches('"').trim();
    (!s.is_empty()).then(|| s.to_string())
}

fn request(agent: &ureq::Agent, cfg: &LabelerConfig, url: &str, body: &Value) -> Result<String, String> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(t) = &cfg.token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
    let v: Value = resp.body_mut().read_json().map_err(|e| format!("malformed response: {e}"))?;
    extract_content(&v).ok_or_else(|| "malformed response: no content".to_string())
}

/// Ask the endpoint for a label. Never fails: without an endpoint, or when
/// every attempt fails, the outcome is the placeholder `feature-<id>`.
pub fn auto_label(feature: usize, contexts: &[TopActivation], cfg: &LabelerConfig) -> LabelOutcome {
    let placeholder = |attempts, error: String| LabelOutcome {
        feature,
        label: placeholder_label(feature),
        source: LabelSource::Placeholder,
        attempts,
        error: Some(error),
        prompt_version: LABEL_PROMPT_VERSION,
    };
    let Some(url) = &cfg.url else {
        return placeholder(0, "no labeler endpoint configured".into());
    };
    if contexts.is_empty() {
        return placeholder(0, "feature has no active contexts".into());
    }
    let mut body = json!({
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": build_label_prompt(feature, contexts)},
        ]
    });
    if let Some(m) = &cfg.model {
        body["model"] = json!(m);
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let mut last = String::new();
    for attempt in 1..=cfg.retries + 1 {
        match request(&agent, cfg, url, &body) {
            Ok(label) => {
                return LabelOutcome {
                    feature,
                    label,
                    source: LabelSource::Auto,
                    attempts: attempt,
                    error: None,
                    prompt_version: LABEL_PROMPT_VERSION,
                }
            }
            Err(e) => {
                tracing::warn!(feature, attempt, error = %e, "labeler request failed");
                last = e;
            }
        }
    }
    tracing::error!(feature, retries = cfg.retries, "labeler gave up; using placeholder");
    placeholder(cfg.retries + 1, last)
}
