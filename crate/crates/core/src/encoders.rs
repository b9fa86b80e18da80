//! Siamese patch encoder for template/search images and the caption encoder
//! used to condition the diffusion U-Net.

use candle_core::{DType, Device, Tensor};

use crate::config::{EncoderConfig, TextConfig};
use crate::error::{GladError, Result};
use crate::nn::{map_to_tokens, Attention, Conv2d, FeedForward, Init, LayerNorm, Scope};
use crate::vocab;

/// A 2-D feature grid flattened row-major into `[B, H*W, C]` tokens.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != grid_h * grid_w {
            return Err(GladError::Shape(format!(
                "{n} tokens do not form a {grid_h}x{grid_w} grid"
            )));
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn from_map(map: &Tensor) -> Result<Self> {
        let (_, _, h, w) = map.dims4()?;
        Self::new(map_to_tokens(map)?, h, w)
    }

    pub fn to_map(&self) -> Result<Tensor> {
        crate::nn::tokens_to_map(&self.tokens, self.grid_h, self.grid_w)
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid_h, self.grid_w, self.channels())
    }

    pub fn detach(&self) -> Self {
        Self {
            tokens: self.tokens.detach(),
            ..self.clone()
        }
    }
}

/// Pre-norm transformer block: `x + SA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(vs: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&vs.pp("ln1"), dim)?,
            attn: Attention::self_attn(&vs.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&vs.pp("ln2"), dim)?,
            ffn: FeedForward::new(&vs.pp("ffn"), dim, dim * 4, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.ln1.forward(x)?;
        let (a, w) = self.attn.forward(&h, &h, key_mask)?;
        let x = (x + a)?;
        let x = (&x + self.ffn.forward(&self.ln2.forward(&x)?)?)?;
        Ok((x, w))
    }
}

/// Patch-embedding transformer shared by the template and search paths.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: Conv2d,
    pos: Option<Tensor>,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    patch: usize,
    max_grid: usize,
}

impl ImageEncoder {
    pub fn new(vs: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        let max_grid = cfg.search_grid();
        let pos = if cfg.pos_embed {
            Some(vs.get(
                "pos_embed",
                &[max_grid * max_grid, cfg.dim],
                Init::Normal { std: 0.02 },
            )?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&vs.pp(format!("blocks.{i}")), cfg.dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Conv2d::new(&vs.pp("patch_embed"), 3, cfg.dim, cfg.patch, cfg.patch, 0)?,
            pos,
            blocks,
            norm: LayerNorm::new(&vs.pp("norm"), cfg.dim)?,
            patch: cfg.patch,
            max_grid,
        })
    }

    /// Encodes a `[B, 3, H, W]` batch; also returns every block's attention weights.
    pub fn forward_with_weights(&self, images: &Tensor) -> Result<(TokenGrid, Vec<Tensor>)> {
        let (_, _, h, w) = images.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(GladError::Shape(format!(
                "image {h}x{w} is not divisible by patch {}",
                self.patch
            )));
        }
        let (gh, gw) = (h / self.patch, w / self.patch);
        if gh > self.max_grid || gw > self.max_grid {
            return Err(GladError::Shape(format!(
                "grid {gh}x{gw} exceeds the encoder's {0}x{0} positional table",
                self.max_grid
            )));
        }
        let mut x = map_to_tokens(&self.patch_embed.forward(images)?)?;
        if let Some(pos) = &self.pos {
            let c = pos.dims()[1];
            let table = pos
                .reshape((self.max_grid, self.max_grid, c))?
                .narrow(0, 0, gh)?
                .narrow(1, 0, gw)?
                .reshape((gh * gw, c))?;
            x = x.broadcast_add(&table)?;
        }
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(&x, None)?;
            x = y;
            weights.push(w);
        }
        let grid = TokenGrid::new(self.norm.forward(&x)?, gh, gw)?;
        Ok((grid, weights))
    }

    pub fn forward(&self, images: &Tensor) -> Result<TokenGrid> {
        Ok(self.forward_with_weights(images)?.0)
    }
}

/// Token ids padded/truncated to a fixed length, with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TextTokens {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Lowercases, splits on anything that is not alphanumeric, maps words to the
/// closed vocabulary (unknown words become OOV) and pads to `max_len`.
pub fn tokenize_text(text: &str, max_len: usize) -> TextTokens {
    let mut ids: Vec<u32> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(vocab::id)
        .take(max_len)
        .collect();
    let n = ids.len();
    ids.resize(max_len, vocab::PAD_ID);
    let mask = (0..max_len).map(|i| i < n).collect();
    TextTokens { ids, mask }
}

/// Token-level caption features `[B, L, C]` with a `[B, L]` validity mask
/// (1.0 valid, 0.0 padding).
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub tokens: Tensor,
    pub mask: Tensor,
}

impl TextFeatures {
    pub fn detach(&self) -> Self {
        Self {
            tokens: self.tokens.detach(),
            mask: self.mask.clone(),
        }
    }

    pub fn cat(items: &[&TextFeatures]) -> Result<Self> {
        let tokens: Vec<&Tensor> = items.iter().map(|t| &t.tokens).collect();
        let masks: Vec<&Tensor> = items.iter().map(|t| &t.mask).collect();
        Ok(Self {
            tokens: Tensor::cat(&tokens, 0)?,
            mask: Tensor::cat(&masks, 0)?,
        })
    }

    /// Mean over valid tokens, `[B, C]`; zero when a caption is empty.
    pub fn pooled(&self) -> Result<Tensor> {
        let m = self.mask.to_dtype(self.tokens.dtype())?.unsqueeze(2)?;
        let sum = self.tokens.broadcast_mul(&m)?.sum(1)?;
        let count = m.sum(1)?.maximum(1.0)?;
        Ok(sum.broadcast_div(&count)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(vs: &Scope, cfg: &TextConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(&vs.pp(format!("blocks.{i}")), cfg.dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: vs.get(
                "embed",
                &[vocab::size(), cfg.dim],
                Init::Normal { std: 0.5 },
            )?,
            pos: vs.get(
                "pos_embed",
                &[cfg.max_len, cfg.dim],
                Init::Normal { std: 0.5 },
            )?,
            blocks,
            norm: LayerNorm::new(&vs.pp("norm"), cfg.dim)?,
            max_len: cfg.max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokenize(&self, text: &str) -> TextTokens {
        tokenize_text(text, self.max_len)
    }

    pub fn encode_text(&self, tokens: &TextTokens) -> Result<TextFeatures> {
        Ok(self.encode_with_weights(tokens)?.0)
    }

    pub fn encode_with_weights(&self, tokens: &TextTokens) -> Result<(TextFeatures, Vec<Tensor>)> {
        if tokens.ids.len() != self.max_len || tokens.mask.len() != self.max_len {
            return Err(GladError::Shape(format!(
                "expected {} text ids, got {}",
                self.max_len,
                tokens.ids.len()
            )));
        }
        let device = self.embed.device();
        let dtype = self.embed.dtype();
        let ids = Tensor::new(tokens.ids.as_slice(), device)?;
        let mask_vals: Vec<f32> = tokens
            .mask
            .iter()
            .map(|m| if *m { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask_vals, (1, self.max_len), device)?.to_dtype(dtype)?;
        let mut x = self
            .embed
            .index_select(&ids, 0)?
            .broadcast_add(&self.pos)?
            .unsqueeze(0)?;
        let mut weights = Vec::new();
        for block in &self.blocks {
            let (y, w) = block.forward(&x, Some(&mask))?;
            x = y;
            weights.push(w);
        }
        let x = self.norm.forward(&x)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        Ok((TextFeatures { tokens: x, mask }, weights))
    }

    pub fn encode_str(&self, text: &str) -> Result<TextFeatures> {
        self.encode_text(&self.tokenize(text))
    }
}

/// All-ones mask for `n` tokens per batch item.
pub fn full_mask(batch: usize, n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::ones((batch, n), dtype, device)?)
}
