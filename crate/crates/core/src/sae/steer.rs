// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions built from SAE features.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{unit, Sae};
use crate::error::Result;
use crate::model::{Intervention, Payload, Positions, RowTransform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    /// `x + m · ŵ_f`: keeps the SAE's reconstruction error out of the edit.
    #[default]
    AddDirection,
    /// `W_dec(encode(x) + m · e_f)`: replaces the activation with the
    /// steered reconstruction.
    ReconstructReplace,
}

/// Row transform for [`SteeringMode::ReconstructReplace`].
#[derive(Debug)]
pub struct ReconstructReplace {
    pub sae: Arc<Sae>,
    pub feature: usize,
    pub magnitude: f32,
}

impl RowTransform for ReconstructReplace {
    fn width(&self) -> usize {
        self.sae.params.d_in()
    }

    fn transform(&self, row: &[f32]) -> Vec<f32> {
        let Ok(mut h) = self.sae.encode_activation(row) else {
            return row.to_vec();
        };
        h[self.feature] += self.magnitude;
        self.sae.decode_activation(&h).unwrap_or_else(|_| row.to_vec())
    }
}

/// Steering edit for `feature` at the SAE's hook, on all positions.
/// Narrow `positions` on the result to restrict it.
pub fn steering_vector(
    sae: &Arc<Sae>,
    feature: usize,
    magnitude: f32,
    mode: SteeringMode,
) -> Result<Intervention> {
    let column = sae.params.decoder_column(feature)?;
    Ok(match mode {
        SteeringMode::AddDirection => Intervention::add(
            sae.hook,
            Payload::Direction {
                direction: unit(&column),
                magnitude,
            },
            Positions::All,
        ),
        SteeringMode::ReconstructReplace => Intervention::replace(
            sae.hook,
            Payload::Computed(Arc::new(ReconstructReplace {
                sae: Arc::clone(sae),
                feature,
                magnitude,
            })),
            Positions::All,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::tiny_model;
    use crate::model::{Capture, GenerateParams, HookPoint};
    use crate::sae::{SaeConfig, SaeParams};
    use crate::MifinError;

    fn fixture_sae(d: usize) -> Arc<Sae> {
        let params = SaeParams::init(&SaeConfig::expansion(d, 0.0)).unwrap();
        Arc::new(Sae::new(params, HookPoint::ResidPost(0), None).unwrap())
    }

    #[test]
    fn zero_magnitude_is_a_noop_for_generation() {
        let m = tiny_model();
        let sae = fixture_sae(m.config.d_model);
        let prompt = m.encode("The bank reported");
        let plain = m.generate(&prompt, &GenerateParams::greedy(8)).unwrap();
        let iv = steering_vector(&sae, 3, 0.0, SteeringMode::AddDirection).unwrap();
        let steered = m
            .generate(&prompt, &GenerateParams::greedy(8).with_interventions(vec![iv]))
            .unwrap();
        assert_eq!(plain, steered);
    }

    #[test]
    fn opposite_magnitudes_cancel() {
        let m = tiny_model();
        let sae = fixture_sae(m.config.d_model);
        let tokens = m.encode("credit spreads widened");
        let (base, _) = m.forward(&tokens, &Capture::none()).unwrap();
        let ivs = vec![
            steering_vector(&sae, 5, 4.0, SteeringMode::AddDirection).unwrap(),
            steering_vector(&sae, 5, -4.0, SteeringMode::AddDirection).unwrap(),
        ];
        let (out, _) = m.forward_with_interventions(&tokens, &ivs, &Capture::none()).unwrap();
        let diff = base
            .data()
            .iter()
            .zip(out.data())
            .fold(0.0f32, |a, (x, y)| a.max((x - y).abs()));
        assert!(diff < 1e-4, "max diff {diff}");
    }

    #[test]
    fn reconstruct_replace_with_zero_magnitude_is_the_reconstruction() {
        let sae = fixture_sae(4);
        let iv = steering_vector(&sae, 0, 0.0, SteeringMode::ReconstructReplace).unwrap();
        let crate::model::Action::Replace(Payload::Computed(t)) = &iv.action else {
            panic!("expected a computed replacement");
        };
        let x = [0.5, -1.0, 2.0, 0.25];
        let expect = sae.params.decode_row(&sae.params.encode_row(&x).unwrap()).unwrap();
        assert_eq!(t.transform(&x), expect);
    }

    #[test]
    fn out_of_range_feature_is_rejected() {
        let sae = fixture_sae(4);
        let err = steering_vector(&sae, 32, 1.0, SteeringMode::AddDirection).unwrap_err();
        assert!(matches!(err, MifinError::FeatureId { feature: 32, d_hid: 32 }));
    }
}
