// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trained SAEs on disk: `sae.safetensors` (`W_enc`, `b`, `W_dec`, and
//! `input_mean` for stores built with mean-centering) plus a `sae.json`
//! sidecar recording config, training parameters and provenance.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SaeConfig, SaeParams, TrainParams, TrainingReport};
use crate::error::{MifinError, Result};
use crate::model::HookPoint;
use crate::store::ActivationStore;
use crate::tensor::Matrix;

pub const SAE_WEIGHTS_FILE: &str = "sae.safetensors";
pub const SAE_SIDECAR_FILE: &str = "sae.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeSidecar {
    pub format_version: u32,
    pub config: SaeConfig,
    pub hook: HookPoint,
    #[serde(default)]
    pub train: Option<TrainParams>,
    #[serde(default)]
    pub store_manifest_hash: Option<String>,
    #[serde(default)]
    pub model_hash: Option<String>,
    #[serde(default)]
    pub report: Option<TrainingReport>,
    /// SHA-256 of `sae.safetensors`.
    pub weights_sha256: String,
}

/// An SAE bound to the hook it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    pub params: SaeParams,
    pub hook: HookPoint,
    /// Subtracted before encoding and added back after decoding.
    pub input_mean: Option<Vec<f32>>,
    pub sidecar: SaeSidecar,
    weights: Vec<u8>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn serialize(params: &SaeParams, mean: Option<&[f32]>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(&str, Vec<usize>, Vec<u8>)> = vec![
        ("W_enc", vec![params.d_hid(), params.d_in()], f32_bytes(params.w_enc.data())),
        ("b", vec![params.d_hid()], f32_bytes(&params.b)),
        ("W_dec", vec![params.d_in(), params.d_hid()], f32_bytes(params.w_dec.data())),
    ];
    if let Some(m) = mean {
        tensors.push(("input_mean", vec![m.len()], f32_bytes(m)));
    }
    let views = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.to_string(), v))
                .map_err(|e| MifinError::shape(*name, format!("{e:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = [("format".to_string(), "mifin-sae".to_string())].into();
    safetensors::serialize(views, Some(meta))
        .map_err(|e| MifinError::load(SAE_WEIGHTS_FILE, format!("{e:?}")))
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let t = st
        .tensor(name)
        .map_err(|e| MifinError::load(SAE_WEIGHTS_FILE, format!("{name}: {e:?}")))?;
    if t.dtype() != Dtype::F32 || t.shape() != shape {
        return Err(MifinError::shape(
            name,
            format!("{:?} {:?}, expected F32 {shape:?}", t.dtype(), t.shape()),
        ));
    }
    Ok(t.data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl Sae {
    pub fn new(params: SaeParams, hook: HookPoint, input_mean: Option<Vec<f32>>) -> Result<Self> {
        let config = SaeConfig {
            d_in: params.d_in(),
            d_hid: params.d_hid(),
            alpha: 0.0,
            seed: 0,
        };
        Self::with_sidecar(
            params,
            input_mean,
            SaeSidecar {
                format_version: 1,
                config,
                hook,
                train: None,
                store_manifest_hash: None,
                model_hash: None,
                report: None,
                weights_sha256: String::new(),
            },
        )
    }

    /// Bind freshly trained parameters to the store they came from.
    pub fn from_training(
        params: SaeParams,
        store: &ActivationStore,
        config: SaeConfig,
        train: TrainParams,
        report: TrainingReport,
    ) -> Result<Self> {
        Self::with_sidecar(
            params,
            store.manifest.mean.clone(),
            SaeSidecar {
                format_version: 1,
                config,
                hook: store.hook(),
                train: Some(train),
                store_manifest_hash: Some(store.manifest_hash()),
                model_hash: Some(store.manifest.model_hash.clone()),
                report: Some(report),
                weights_sha256: String::new(),
            },
        )
    }

    fn with_sidecar(params: SaeParams, input_mean: Option<Vec<f32>>, mut sidecar: SaeSidecar) -> Result<Self> {
        if let Some(m) = &input_mean {
            if m.len() != params.d_in() {
                return Err(MifinError::shape(
                    "input_mean",
                    format!("{} entries, expected {}", m.len(), params.d_in()),
                ));
            }
        }
        if !params.all_finite() {
            return Err(MifinError::InvalidParam("SAE parameters are not finite".into()));
        }
        let weights = serialize(&params, input_mean.as_deref())?;
        sidecar.weights_sha256 = hex::encode(Sha256::digest(&weights));
        Ok(Self {
            hook: sidecar.hook,
            params,
            input_mean,
            sidecar,
            weights,
        })
    }

    /// Checkpoint identity: SHA-256 of the weights file.
    pub fn hash(&self) -> &str {
        &self.sidecar.weights_sha256
    }

    pub fn d_hid(&self) -> usize {
        self.params.d_hid()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SAE_WEIGHTS_FILE), &self.weights)?;
        let mut json = serde_json::to_string_pretty(&self.sidecar)?;
        json.push('\n');
        std::fs::write(dir.join(SAE_SIDECAR_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let wp = dir.join(SAE_WEIGHTS_FILE);
        let sp = dir.join(SAE_SIDECAR_FILE);
        let weights = std::fs::read(&wp).map_err(|e| MifinError::load(&wp, e))?;
        let text = std::fs::read_to_string(&sp).map_err(|e| MifinError::load(&sp, e))?;
        let sidecar: SaeSidecar = serde_json::from_str(&text)?;
        let found = hex::encode(Sha256::digest(&weights));
        if found != sidecar.weights_sha256 {
            return Err(MifinError::ManifestMismatch {
                path: wp,
                expected: sidecar.weights_sha256,
                found,
            });
        }
        let st = SafeTensors::deserialize(&weights)
            .map_err(|e| MifinError::load(&wp, format!("{e:?}")))?;
        let (d_in, d_hid) = (sidecar.config.d_in, sidecar.config.d_hid);
        let params = SaeParams::new(
            Matrix::new(d_hid, d_in, read_tensor(&st, "W_enc", &[d_hid, d_in])?)?,
            read_tensor(&st, "b", &[d_hid])?,
            Matrix::new(d_in, d_hid, read_tensor(&st, "W_dec", &[d_in, d_hid])?)?,
        )?;
        let input_mean = match st.tensor("input_mean") {
            Ok(_) => Some(read_tensor(&st, "input_mean", &[d_in])?),
            Err(_) => None,
        };
        drop(st);
        Ok(Self {
            hook: sidecar.hook,
            params,
            input_mean,
            sidecar,
            weights,
        })
    }

    /// Latents for one raw hook activation row.
    pub fn encode_activation(&self, row: &[f32]) -> Result<Vec<f32>> {
        match &self.input_mean {
            Some(m) if m.len() == row.len() => {
                let centered: Vec<f32> = row.iter().zip(m).map(|(x, m)| x - m).collect();
                self.params.encode_row(&centered)
            }
            _ => self.params.encode_row(row),
        }
    }

    /// Hook-space reconstruction of a latent vector.
    pub fn decode_activation(&self, h: &[f32]) -> Result<Vec<f32>> {
        let mut x = self.params.decode_row(h)?;
        if let Some(m) = &self.input_mean {
            x.iter_mut().zip(m).for_each(|(x, m)| *x += m);
        }
        Ok(x)
    }

    /// Latents for every row of a raw activation matrix.
    pub fn encode_activations(&self, x: &Matrix) -> Result<Matrix> {
        match &self.input_mean {
            Some(m) if m.len() == x.cols() => {
                let mut c = x.clone();
                let neg: Vec<f32> = m.iter().map(|v| -v).collect();
                c.add_row_vector(&neg);
                self.params.encode(&c)
            }
            _ => self.params.encode(x),
        }
    }
}
