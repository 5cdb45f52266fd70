// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named activation sites, capture selectors, and interventions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::ModelConfig;
use crate::tensor::Matrix;

/// An addressable intermediate activation.
///
/// All sites are `[n_positions × width]`. `AttnZ` is the per-head weighted
/// value output before the output projection (width `d_head`);
/// `AttnPattern` is the post-softmax attention matrix of one head
/// (`[n_positions × n_positions]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    EmbedOut,
    AttnPattern { layer: usize, head: usize },
    AttnZ { layer: usize, head: usize },
    AttnOut(usize),
    ResidMid(usize),
    MlpOut(usize),
    ResidPost(usize),
    FinalLnOut,
    Logits,
}

impl HookPoint {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            HookPoint::AttnPattern { layer, .. }
            | HookPoint::AttnZ { layer, .. }
            | HookPoint::AttnOut(layer)
            | HookPoint::ResidMid(layer)
            | HookPoint::MlpOut(layer)
            | HookPoint::ResidPost(layer) => Some(layer),
            HookPoint::EmbedOut | HookPoint::FinalLnOut | HookPoint::Logits => None,
        }
    }

    /// Column count of the activation at this site.
    pub fn width(&self, cfg: &ModelConfig, n_pos: usize) -> usize {
        match self {
            HookPoint::AttnZ { .. } => cfg.d_head(),
            HookPoint::AttnPattern { .. } => n_pos,
            HookPoint::Logits => cfg.vocab_size,
            _ => cfg.d_model,
        }
    }

    /// True for sites carrying a `d_model`-wide residual-space vector.
    pub fn is_model_width(&self) -> bool {
        !matches!(
            self,
            HookPoint::AttnZ { .. } | HookPoint::AttnPattern { .. } | HookPoint::Logits
        )
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(layer) = self.layer() {
            if layer >= cfg.n_layers {
                return Err(MifinError::Hook {
                    hook: self.to_string(),
                    detail: format!("layer {layer} >= n_layers {}", cfg.n_layers),
                });
            }
        }
        if let HookPoint::AttnZ { head, .. } | HookPoint::AttnPattern { head, .. } = *self {
            if head >= cfg.n_heads {
                return Err(MifinError::Hook {
                    hook: self.to_string(),
                    detail: format!("head {head} >= n_heads {}", cfg.n_heads),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::EmbedOut => write!(f, "embed_out"),
            HookPoint::AttnPattern { layer, head } => write!(f, "attn_pattern.{layer}.{head}"),
            HookPoint::AttnZ { layer, head } => write!(f, "attn_z.{layer}.{head}"),
            HookPoint::AttnOut(l) => write!(f, "attn_out.{l}"),
            HookPoint::ResidMid(l) => write!(f, "resid_mid.{l}"),
            HookPoint::MlpOut(l) => write!(f, "mlp_out.{l}"),
            HookPoint::ResidPost(l) => write!(f, "resid_post.{l}"),
            HookPoint::FinalLnOut => write!(f, "final_ln_out"),
            HookPoint::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for HookPoint {
    type Err = MifinError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: &str| MifinError::Hook {
            hook: s.to_string(),
            detail: detail.to_string(),
        };
        let mut parts = s.split('.');
        let kind = parts.next().unwrap_or_default();
        let nums: Vec<usize> = parts
            .map(|p| p.parse::<usize>().map_err(|_| bad("indices must be integers")))
            .collect::<Result<_>>()?;
        let hook = match (kind, nums.as_slice()) {
            ("embed_out", []) => HookPoint::EmbedOut,
            ("final_ln_out", []) => HookPoint::FinalLnOut,
            ("logits", []) => HookPoint::Logits,
            ("attn_z", [l, h]) => HookPoint::AttnZ { layer: *l, head: *h },
            ("attn_pattern", [l, h]) => HookPoint::AttnPattern { layer: *l, head: *h },
            ("attn_out", [l]) => HookPoint::AttnOut(*l),
            ("resid_mid", [l]) => HookPoint::ResidMid(*l),
            ("mlp_out", [l]) => HookPoint::MlpOut(*l),
            ("resid_post", [l]) => HookPoint::ResidPost(*l),
            _ => return Err(bad("expected e.g. resid_post.6 or attn_z.8.5")),
        };
        Ok(hook)
    }
}

impl Serialize for HookPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which hook points a forward pass records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    hooks: BTreeSet<HookPoint>,
}

impl Capture {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(hooks: impl IntoIterator<Item = HookPoint>) -> Self {
        Self {
            hooks: hooks.into_iter().collect(),
        }
    }

    pub fn with(mut self, hook: HookPoint) -> Self {
        self.hooks.insert(hook);
        self
    }

    pub fn resid_post_all(n_layers: usize) -> Self {
        Self::of((0..n_layers).map(HookPoint::ResidPost))
    }

    pub fn attn_z_all(cfg: &ModelConfig) -> Self {
        Self::of((0..cfg.n_layers).flat_map(|layer| {
            (0..cfg.n_heads).map(move |head| HookPoint::AttnZ { layer, head })
        }))
    }

    pub fn contains(&self, hook: &HookPoint) -> bool {
        self.hooks.contains(hook)
    }

    pub fn hooks(&self) -> impl Iterator<Item = &HookPoint> {
        self.hooks.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }
}

/// Activations recorded during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    acts: BTreeMap<HookPoint, Matrix>,
}

impl ActivationCache {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            acts: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, hook: HookPoint, act: Matrix) {
        self.acts.insert(hook, act);
    }

    pub fn get(&self, hook: &HookPoint) -> Option<&Matrix> {
        self.acts.get(hook)
    }

    pub fn require(&self, hook: &HookPoint) -> Result<&Matrix> {
        self.get(hook).ok_or_else(|| MifinError::Hook {
            hook: hook.to_string(),
            detail: "not captured in this run".into(),
        })
    }

    pub fn take(&mut self, hook: &HookPoint) -> Option<Matrix> {
        self.acts.remove(hook)
    }

    pub fn hooks(&self) -> impl Iterator<Item = &HookPoint> {
        self.acts.keys()
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }
}

/// Rows of the hook output an intervention touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    All,
    Only(Vec<usize>),
}

impl Positions {
    /// Resolve against a sequence of `n_pos` rows. `Only` lists are used in
    /// the given order; indices past the end are rejected.
    fn resolve(&self, n_pos: usize, hook: &HookPoint) -> Result<Vec<usize>> {
        match self {
            Positions::All => Ok((0..n_pos).collect()),
            Positions::Only(list) => {
                if let Some(&p) = list.iter().find(|&&p| p >= n_pos) {
                    return Err(MifinError::InterventionShape {
                        hook: hook.to_string(),
                        detail: format!("position {p} but only {n_pos} positions"),
                    });
                }
                Ok(list.clone())
            }
        }
    }

    /// Like [`Positions::resolve`] but silently dropping positions beyond
    /// the current sequence; used while a generated sequence is growing.
    pub(crate) fn clip(&self, n_pos: usize) -> Positions {
        match self {
            Positions::All => Positions::All,
            Positions::Only(list) => {
                Positions::Only(list.iter().copied().filter(|&p| p < n_pos).collect())
            }
        }
    }
}

/// Row-wise function of the current activation, evaluated during the pass.
pub trait RowTransform: Send + Sync + fmt::Debug {
    fn width(&self) -> usize;
    fn transform(&self, row: &[f32]) -> Vec<f32>;
}

#[derive(Clone, Debug)]
pub enum Payload {
    /// One row per selected position.
    Rows(Matrix),
    /// A single row broadcast to every selected position.
    Vector(Vec<f32>),
    /// `magnitude * direction`, broadcast.
    Direction { direction: Vec<f32>, magnitude: f32 },
    /// Computed from the activation being edited.
    Computed(Arc<dyn RowTransform>),
}

#[derive(Clone, Debug)]
pub enum Action {
    Replace(Payload),
    Add(Payload),
    Scale(f32),
}

/// An edit applied at one hook point during a forward pass.
#[derive(Clone, Debug)]
pub struct Intervention {
    pub hook: HookPoint,
    pub action: Action,
    pub positions: Positions,
}

impl Intervention {
    pub fn replace(hook: HookPoint, payload: Payload, positions: Positions) -> Self {
        Self {
            hook,
            action: Action::Replace(payload),
            positions,
        }
    }

    pub fn add(hook: HookPoint, payload: Payload, positions: Positions) -> Self {
        Self {
            hook,
            action: Action::Add(payload),
            positions,
        }
    }

    pub fn scale(hook: HookPoint, factor: f32, positions: Positions) -> Self {
        Self {
            hook,
            action: Action::Scale(factor),
            positions,
        }
    }

    /// Same edit with positions clipped to a sequence of `n_pos` rows.
    pub(crate) fn clipped(&self, n_pos: usize) -> Self {
        Self {
            positions: self.positions.clip(n_pos),
            ..self.clone()
        }
    }

    fn shape_err(&self, detail: String) -> MifinError {
        MifinError::InterventionShape {
            hook: self.hook.to_string(),
            detail,
        }
    }

    /// Static shape check against a sequence of `n_pos` positions.
    pub fn check(&self, cfg: &ModelConfig, n_pos: usize) -> Result<()> {
        self.hook.validate(cfg)?;
        let width = self.hook.width(cfg, n_pos);
        let selected = self.positions.resolve(n_pos, &self.hook)?.len();
        let payload = match &self.action {
            Action::Replace(p) | Action::Add(p) => p,
            Action::Scale(_) => return Ok(()),
        };
        match payload {
            Payload::Rows(m) => {
                if m.shape() != (selected, width) {
                    return Err(self.shape_err(format!(
                        "payload is {}x{}, expected {selected}x{width}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
            Payload::Vector(v) | Payload::Direction { direction: v, .. } => {
                if v.len() != width {
                    return Err(
                        self.shape_err(format!("vector of length {}, expected {width}", v.len()))
                    );
                }
            }
            Payload::Computed(t) => {
                if t.width() != width {
                    return Err(self.shape_err(format!(
                        "transform of width {}, expected {width}",
                        t.width()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply in place to a hook activation.
    pub(crate) fn apply(&self, act: &mut Matrix) -> Result<()> {
        let rows = self.positions.resolve(act.rows(), &self.hook)?;
        match &self.action {
            Action::Scale(f) => {
                for &r in &rows {
                    act.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
            }
            Action::Replace(p) | Action::Add(p) => {
                let add = matches!(self.action, Action::Add(_));
                for (i, &r) in rows.iter().enumerate() {
                    let computed;
                    let scaled;
                    let src: &[f32] = match p {
                        Payload::Rows(m) => m.row(i),
                        Payload::Vector(v) => v,
                        Payload::Direction {
                            direction,
                            magnitude,
                        } => {
                            scaled = direction.iter().map(|d| d * magnitude).collect::<Vec<_>>();
                            &scaled
                        }
                        Payload::Computed(t) => {
                            computed = t.transform(act.row(r));
                            &computed
                        }
                    };
                    if src.len() != act.cols() {
                        return Err(self.shape_err(format!(
                            "row of length {}, activation width {}",
                            src.len(),
                            act.cols()
                        )));
                    }
                    let dst = act.row_mut(r);
                    if add {
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    } else {
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hook_names_round_trip() {
        for h in [
            HookPoint::EmbedOut,
            HookPoint::AttnZ { layer: 8, head: 5 },
            HookPoint::AttnPattern { layer: 0, head: 1 },
            HookPoint::ResidPost(6),
            HookPoint::MlpOut(2),
            HookPoint::Logits,
        ] {
            assert_eq!(h.to_string().parse::<HookPoint>().unwrap(), h);
        }
        assert!("resid_post".parse::<HookPoint>().is_err());
        assert!("attn_z.1".parse::<HookPoint>().is_err());
    }

    #[test]
    fn interventions_compose_in_order() {
        let hook = HookPoint::ResidPost(0);
        let mut act = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        Intervention::add(hook, Payload::Vector(vec![1.0, 1.0]), Positions::All)
            .apply(&mut act)
            .unwrap();
        Intervention::scale(hook, 2.0, Positions::Only(vec![1]))
            .apply(&mut act)
            .unwrap();
        assert_eq!(act.data(), &[2.0, 3.0, 8.0, 10.0]);
    }

    #[test]
    fn out_of_range_position_is_a_shape_error() {
        let hook = HookPoint::ResidPost(0);
        let mut act = Matrix::zeros(2, 2);
        let iv = Intervention::add(hook, Payload::Vector(vec![0.0, 0.0]), Positions::Only(vec![2]));
        assert!(matches!(
            iv.apply(&mut act),
            Err(MifinError::InterventionShape { .. })
        ));
    }
}
