use candle_core::{Tensor, D};

use crate::encoders::{TextFeatures, TokenGrid};
use crate::error::{bail, GladError, Result};
use crate::nn::{
    map_to_tokens, tokens_to_map, Attention, Conv2d, FeedForward, Init, LayerNorm, Linear, Scope,
};

use super::vae::LATENT_CHANNELS;

pub const SUBMODULES: usize = 16;
pub const CONTRACTING: usize = 7;

/// Resolution level (0 = finest) of each submodule, 1-based index.
pub fn submodule_level(index: usize) -> Result<usize> {
    match index {
        1 | 2 | 13..=16 => Ok(0),
        3..=5 | 10..=12 => Ok(1),
        6..=9 => Ok(2),
        _ => Err(GladError::Config(format!(
            "tap index {index} outside 1..{SUBMODULES}"
        ))),
    }
}

/// Submodule whose output is added to the input of expanding submodule `index`.
fn skip_source(index: usize) -> Option<usize> {
    match index {
        8..=14 => Some(15 - index),
        _ => None,
    }
}

/// Intermediate U-Net features, in the order the taps were requested.
#[derive(Debug, Clone)]
pub struct UNetTaps {
    pub taps: Vec<TokenGrid>,
    pub indices: Vec<usize>,
}

impl UNetTaps {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.taps.iter().map(|t| t.shape()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            taps: self.taps.iter().map(|t| t.detach()).collect(),
            indices: self.indices.clone(),
        }
    }

    /// Stacks per-sample taps along the batch axis.
    pub fn cat(items: &[&UNetTaps]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| GladError::Input("no taps to concatenate".into()))?;
        let mut taps = Vec::with_capacity(first.len());
        for i in 0..first.len() {
            let parts: Vec<&Tensor> = items.iter().map(|t| &t.taps[i].tokens).collect();
            taps.push(TokenGrid::new(
                Tensor::cat(&parts, 0)?,
                first.taps[i].grid_h,
                first.taps[i].grid_w,
            )?);
        }
        Ok(Self {
            taps,
            indices: first.indices.clone(),
        })
    }
}

/// Self-attention, text cross-attention and FFN, each pre-norm with a residual.
#[derive(Debug, Clone)]
struct Submodule {
    time_proj: Linear,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl Submodule {
    fn new(vs: &Scope, dim: usize, text_dim: usize, time_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            time_proj: Linear::new(&vs.pp("time_proj"), time_dim, dim)?,
            ln1: LayerNorm::new(&vs.pp("ln1"), dim)?,
            self_attn: Attention::self_attn(&vs.pp("self_attn"), dim, heads)?,
            ln2: LayerNorm::new(&vs.pp("ln2"), dim)?,
            cross_attn: Attention::new(&vs.pp("cross_attn"), dim, text_dim, dim, dim, dim, heads)?,
            ln3: LayerNorm::new(&vs.pp("ln3"), dim)?,
            ffn: FeedForward::new(&vs.pp("ffn"), dim, dim * 4, dim)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        ctx: &Tensor,
        ctx_mask: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let x = x.broadcast_add(&self.time_proj.forward(temb)?.unsqueeze(1)?)?;
        let h = self.ln1.forward(&x)?;
        let x = (&x + self.self_attn.forward(&h, &h, None)?.0)?;
        let (ca, weights) = self
            .cross_attn
            .forward(&self.ln2.forward(&x)?, ctx, Some(ctx_mask))?;
        let x = (x + ca)?;
        let x = (&x + self.ffn.forward(&self.ln3.forward(&x)?)?)?;
        Ok((x, weights))
    }
}

/// Output of one U-Net evaluation.
#[derive(Debug, Clone)]
pub struct UNetOutput {
    pub eps: Tensor,
    pub taps: UNetTaps,
    /// Cross-attention weights per submodule, `[B, heads, N, 1 + L]`; key 0 is the null token.
    pub cross_weights: Vec<Tensor>,
}

/// Text-conditioned transformer U-Net with 16 submodules over three
/// resolution levels (7 contracting, 9 expanding with additive skips).
#[derive(Debug, Clone)]
pub struct UNet {
    stem: Conv2d,
    down: [Conv2d; 2],
    up: [Conv2d; 2],
    out: Conv2d,
    time1: Linear,
    time2: Linear,
    null_token: Tensor,
    blocks: Vec<Submodule>,
    width: usize,
    latent_size: usize,
}

impl UNet {
    pub fn new(
        vs: &Scope,
        width: usize,
        text_dim: usize,
        heads: usize,
        latent_size: usize,
    ) -> Result<Self> {
        if !latent_size.is_multiple_of(8) {
            bail!(Config, "latent size {latent_size} must be a multiple of 8");
        }
        let c = width;
        let time_dim = 4 * c;
        let blocks = (1..=SUBMODULES)
            .map(|i| {
                let dim = c << submodule_level(i)?;
                Submodule::new(
                    &vs.pp(format!("blocks.{i}")),
                    dim,
                    text_dim,
                    time_dim,
                    heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem: Conv2d::new(&vs.pp("stem"), LATENT_CHANNELS, c, 2, 2, 0)?,
            down: [
                Conv2d::new(&vs.pp("down.0"), c, 2 * c, 2, 2, 0)?,
                Conv2d::new(&vs.pp("down.1"), 2 * c, 4 * c, 2, 2, 0)?,
            ],
            up: [
                Conv2d::new(&vs.pp("up.0"), 4 * c, 2 * c, 3, 1, 1)?,
                Conv2d::new(&vs.pp("up.1"), 2 * c, c, 3, 1, 1)?,
            ],
            out: Conv2d::zeros(&vs.pp("out"), c, LATENT_CHANNELS, 3, 1, 1)?,
            time1: Linear::new(&vs.pp("time.0"), c, time_dim)?,
            time2: Linear::new(&vs.pp("time.1"), time_dim, time_dim)?,
            null_token: vs.get("null_token", &[1, 1, text_dim], Init::Normal { std: 0.5 })?,
            blocks,
            width,
            latent_size,
        })
    }

    pub fn latent_size(&self) -> usize {
        self.latent_size
    }

    /// `(grid_h, grid_w, channels)` of a submodule's output.
    pub fn tap_shape(&self, index: usize) -> Result<(usize, usize, usize)> {
        let level = submodule_level(index)?;
        let side = (self.latent_size / 2) >> level;
        Ok((side, side, self.width << level))
    }

    fn time_embedding(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        let half = self.width / 2;
        let mut data = Vec::with_capacity(ts.len() * self.width);
        for &t in ts {
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                data.push((t as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                data.push((t as f64 * freq).cos());
            }
            data.resize(data.len() + (self.width - 2 * half), 0.0);
        }
        let e = Tensor::from_vec(data, (ts.len(), self.width), like.device())?
            .to_dtype(like.dtype())?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)
    }

    /// Key/value context: a learned null token followed by the caption tokens.
    fn context(&self, text: &TextFeatures, batch: usize) -> Result<(Tensor, Tensor)> {
        let (tb, _, td) = text.tokens.dims3()?;
        let (tokens, mask) = if tb == batch {
            (text.tokens.clone(), text.mask.clone())
        } else if tb == 1 {
            (
                text.tokens
                    .broadcast_as((batch, text.tokens.dims()[1], td))?
                    .contiguous()?,
                text.mask
                    .broadcast_as((batch, text.mask.dims()[1]))?
                    .contiguous()?,
            )
        } else {
            bail!(Shape, "text batch {tb} does not match latent batch {batch}");
        };
        let null = self
            .null_token
            .broadcast_as((batch, 1, td))?
            .to_dtype(tokens.dtype())?;
        let ctx = Tensor::cat(&[&null, &tokens], 1)?;
        let ones = Tensor::ones((batch, 1), mask.dtype(), mask.device())?;
        let mask = Tensor::cat(&[&ones, &mask], 1)?;
        Ok((ctx, mask))
    }

    /// Runs all 16 submodules. `ts` holds one timestep per batch item (or one
    /// for the whole batch); `tap_indices` selects which submodule outputs to return.
    pub fn forward(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        text: &TextFeatures,
        tap_indices: &[usize],
    ) -> Result<UNetOutput> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != LATENT_CHANNELS || h != self.latent_size || w != self.latent_size {
            bail!(
                Shape,
                "U-Net expects [B, {LATENT_CHANNELS}, {0}, {0}] latents, got [{b}, {c}, {h}, {w}]",
                self.latent_size
            );
        }
        for &i in tap_indices {
            submodule_level(i)?;
        }
        let ts: Vec<usize> = match ts.len() {
            1 => vec![ts[0]; b],
            n if n == b => ts.to_vec(),
            n => bail!(Shape, "{n} timesteps for a batch of {b}"),
        };
        let temb = self.time_embedding(&ts, x_t)?;
        let (ctx, ctx_mask) = self.context(text, b)?;

        let mut map = self.stem.forward(x_t)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(SUBMODULES);
        let mut cross_weights = Vec::with_capacity(SUBMODULES);
        let mut level = 0;
        for (k, block) in self.blocks.iter().enumerate() {
            let idx = k + 1;
            let target = submodule_level(idx)?;
            if target > level {
                map = self.down[level].forward(&map)?;
                level = target;
            } else if target < level {
                let (_, _, mh, mw) = map.dims4()?;
                map = self.up[2 - level].forward(&map.upsample_nearest2d(mh * 2, mw * 2)?)?;
                level = target;
            }
            if let Some(src) = skip_source(idx) {
                map = (map + &outputs[src - 1])?;
            }
            let (_, _, mh, mw) = map.dims4()?;
            let (tokens, weights) = block.forward(&map_to_tokens(&map)?, &temb, &ctx, &ctx_mask)?;
            map = tokens_to_map(&tokens, mh, mw)?;
            outputs.push(map.clone());
            cross_weights.push(weights);
        }
        let (_, _, mh, mw) = map.dims4()?;
        let eps = self.out.forward(&map.upsample_nearest2d(mh * 2, mw * 2)?)?;

        let mut taps = Vec::with_capacity(tap_indices.len());
        for &i in tap_indices {
            let grid = TokenGrid::from_map(&outputs[i - 1])?;
            let expected = self.tap_shape(i)?;
            if grid.shape() != expected {
                bail!(
                    Shape,
                    "tap {i} has shape {:?}, expected {:?}",
                    grid.shape(),
                    expected
                );
            }
            taps.push(grid);
        }
        Ok(UNetOutput {
            eps,
            taps: UNetTaps {
                taps,
                indices: tap_indices.to_vec(),
            },
            cross_weights,
        })
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.flatten_all()?.mean(D::Minus1)?)
}
