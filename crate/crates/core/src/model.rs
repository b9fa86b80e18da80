//! The assembled tracker network.

use std::sync::Arc;

use candle_core::{DType, Device};

use crate::config::{FusionMode, ModelConfig};
use crate::diffusion::{DiffusionBackend, ToyDiffusion};
use crate::encoders::{ImageEncoder, TokenGrid};
use crate::error::{bail, Result};
use crate::fusion::{DecoderStack, Fused};
use crate::head::{CenterHead, HeadOutput};
use crate::imaging::{images_to_tensor, Image};
use crate::nn::ParamStore;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DIFFUSION_PREFIX: &str = "diffusion.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const HEAD_PREFIX: &str = "head.";

pub struct GladModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: ImageEncoder,
    backend: Arc<dyn DiffusionBackend>,
    toy: Option<Arc<ToyDiffusion>>,
    decoders: DecoderStack,
    head: CenterHead,
}

impl std::fmt::Debug for GladModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GladModel")
            .field("mode", &self.cfg.fusion.mode)
            .field("params", &self.store.len())
            .finish()
    }
}

impl GladModel {
    /// Builds every component, including the toy diffusion stack, in one store.
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let toy = Arc::new(ToyDiffusion::new(
            &store.root().pp("diffusion"),
            &cfg.diffusion,
            &cfg.text,
        )?);
        let backend: Arc<dyn DiffusionBackend> = toy.clone();
        let mut model = Self::with_backend(cfg, store, backend)?;
        model.toy = Some(toy);
        Ok(model)
    }

    /// Uses an external diffusion backend; its parameters are not in `store`.
    pub fn with_backend(
        cfg: &ModelConfig,
        store: ParamStore,
        backend: Arc<dyn DiffusionBackend>,
    ) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let encoder = ImageEncoder::new(&root.pp("encoder"), &cfg.encoder)?;
        let taps: Vec<(usize, (usize, usize, usize))> = if cfg.fusion.mode == FusionMode::Pooled {
            cfg.diffusion
                .taps
                .iter()
                .copied()
                .zip(backend.tap_shapes()?)
                .collect()
        } else {
            Vec::new()
        };
        let decoders = DecoderStack::new(
            &root.pp("fusion"),
            &cfg.fusion,
            cfg.encoder.dim,
            backend.text_dim(),
            &taps,
        )?;
        let head = CenterHead::new(&root.pp("head"), cfg.encoder.dim, &cfg.head)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            backend,
            toy: None,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn backend(&self) -> &Arc<dyn DiffusionBackend> {
        &self.backend
    }

    pub fn toy_diffusion(&self) -> Option<&Arc<ToyDiffusion>> {
        self.toy.as_ref()
    }

    pub fn decoders(&self) -> &DecoderStack {
        &self.decoders
    }

    pub fn head(&self) -> &CenterHead {
        &self.head
    }

    pub fn mode(&self) -> FusionMode {
        self.cfg.fusion.mode
    }

    /// Siamese encoding of a batch of equally sized crops.
    pub fn encode_images(&self, images: &[&Image]) -> Result<TokenGrid> {
        if images.is_empty() {
            bail!(Input, "no images to encode");
        }
        let x = images_to_tensor(images, self.dtype(), self.device())?;
        self.encoder.forward(&x)
    }

    /// One-off conditioning for each (template, caption) pair: diffusion taps in
    /// the pooled mode, caption features otherwise.
    pub fn condition(&self, templates: &[&Image], texts: &[&str]) -> Result<Fused> {
        if templates.len() != texts.len() {
            bail!(
                Input,
                "{} templates but {} captions",
                templates.len(),
                texts.len()
            );
        }
        let text = self.backend.encode_text(texts)?;
        match self.cfg.fusion.mode {
            FusionMode::Pooled => Ok(Fused::Taps(self.backend.fuse(
                templates,
                &text,
                self.cfg.diffusion.steps,
            )?)),
            _ => Ok(Fused::Text(text)),
        }
    }

    /// Decoders and head on already encoded tokens.
    pub fn predict(
        &self,
        template: &TokenGrid,
        search: &TokenGrid,
        fused: &Fused,
        train: bool,
    ) -> Result<HeadOutput> {
        let decoded = self.decoders.forward(template, search, fused)?;
        self.head.forward(&decoded, train)
    }
}
