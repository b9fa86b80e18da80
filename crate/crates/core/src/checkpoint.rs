//! Versioned weight files.
//!
//! A checkpoint is a safetensors archive keyed by parameter path
//! (`encoder.blocks.0.attn.q.weight`, `diffusion.vae.latent_scale`, ...) with
//! f32 payloads. The header metadata carries:
//!
//! | key            | value                                        |
//! |----------------|----------------------------------------------|
//! | `format`       | `glad-checkpoint`                            |
//! | `version`      | [`CHECKPOINT_VERSION`]                       |
//! | `model_config` | JSON [`ModelConfig`]                         |
//! | `train_state`  | JSON [`TrainState`], absent for bare weights |
//!
//! Optimizer moments are not stored; resuming restarts AdamW from zero moments
//! at the saved step of the learning-rate schedule.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{GladError, Result};
use crate::model::GladModel;
use crate::training::{PretrainConfig, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "glad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stopped, so a resumed run lands on the same schedule point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub train: TrainConfig,
    pub pretrain: Option<PretrainConfig>,
    /// Held-out autoencoder PSNR after pretraining, dB.
    pub vae_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: Option<TrainState>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> GladError {
    GladError::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(model: &GladModel, state: Option<&TrainState>, path: &Path) -> Result<()> {
    let named = model.store().named_tensors();
    let mut payload = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        payload.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = payload
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(StDtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config()).map_err(|e| ckpt_err(path, e))?,
    );
    if let Some(s) = state {
        meta.insert(
            "train_state".to_string(),
            serde_json::to_string(s).map_err(|e| ckpt_err(path, e))?,
        );
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| GladError::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| match e {
        safetensors::SafeTensorError::IoError(io) => GladError::io(path, io),
        other => ckpt_err(path, other),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| GladError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "no metadata header"))?;
    match meta.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => {}
        other => {
            return Err(ckpt_err(
                path,
                format!("not a {CHECKPOINT_FORMAT} file (format {other:?})"),
            ))
        }
    }
    let version: u32 = meta
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_err(path, "missing version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported version {version} (this build reads {CHECKPOINT_VERSION})"),
        ));
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get("model_config")
            .ok_or_else(|| ckpt_err(path, "missing model_config"))?,
    )
    .map_err(|e| ckpt_err(path, format!("model_config: {e}")))?;
    let state = meta
        .get("train_state")
        .map(|s| serde_json::from_str::<TrainState>(s))
        .transpose()
        .map_err(|e| ckpt_err(path, format!("train_state: {e}")))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != StDtype::F32 {
            return Err(ckpt_err(
                path,
                format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype()),
            ));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
    }
    Ok(Checkpoint {
        config,
        state,
        tensors,
    })
}

impl Checkpoint {
    /// Rebuilds the model described by the header and loads every weight.
    pub fn build_model(&self) -> Result<GladModel> {
        self.build_model_with(&self.config)
    }

    /// Like [`Checkpoint::build_model`] with inference-only overrides (e.g.
    /// `head.hann_weight`); the parameter set must be unchanged.
    pub fn build_model_with(&self, cfg: &ModelConfig) -> Result<GladModel> {
        let model = GladModel::new(cfg, DType::F32, 0)?;
        model.store().load(&self.tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_header() {
        let cfg = ModelConfig::desk();
        let model = GladModel::new(&cfg, DType::F32, 3).unwrap();
        model
            .toy_diffusion()
            .unwrap()
            .vae()
            .set_latent_scale(2.5)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let state = TrainState {
            step: 17,
            train: TrainConfig::desk(),
            pretrain: None,
            vae_psnr: Some(24.0),
        };
        save_checkpoint(&model, Some(&state), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.state.as_ref(), Some(&state));
        let back = ck.build_model().unwrap();
        assert_eq!(
            back.toy_diffusion().unwrap().vae().latent_scale().unwrap(),
            2.5
        );
        for ((na, a), (nb, b)) in model
            .store()
            .named_tensors()
            .iter()
            .zip(back.store().named_tensors())
        {
            assert_eq!(na, &nb);
            let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{na}");
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(GladError::Checkpoint(_))
        ));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(GladError::Io { .. })
        ));
    }
}
