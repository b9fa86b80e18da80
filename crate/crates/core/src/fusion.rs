//! Cascaded multi-modal decoders: each U-Net tap is attention-pooled into the
//! visual token space and then cross-attended by the concatenated
//! template/search tokens.

use candle_core::Tensor;

use crate::config::{FusionConfig, FusionMode};
use crate::diffusion::UNetTaps;
use crate::encoders::{TextFeatures, TokenGrid};
use crate::error::{bail, GladError, Result};
use crate::nn::{Attention, FeedForward, Init, LayerNorm, Linear, Scope};

/// Row-stochastic `[m, n]` matrix averaging contiguous groups of the `n` inputs.
/// Group `i` covers `[floor(i n / m), ceil((i + 1) n / m))`, so `n < m` replicates.
pub fn group_mean_matrix(n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let lo = i * n / m;
        let hi = ((i + 1) * n).div_ceil(m).max(lo + 1).min(n);
        let w = 1.0 / (hi - lo) as f64;
        for j in lo..hi {
            out[i * n + j] = w;
        }
    }
    out
}

/// Tap tokens reduced to `M_pool` tokens of the visual width.
#[derive(Debug, Clone)]
pub struct PooledFeatures {
    pub tokens: Tensor,
    pub source_tap: usize,
}

/// Flatten, add a learnable position table, self-attend with a value/output
/// projection into the visual width, reduce tokens by group mean, then FFN.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pe: Tensor,
    attn: Attention,
    reduce: Tensor,
    ln: LayerNorm,
    ffn: FeedForward,
    tap_shape: (usize, usize, usize),
    tap_index: usize,
}

impl AttentionPool {
    pub fn new(
        vs: &Scope,
        tap_index: usize,
        tap_shape: (usize, usize, usize),
        visual_dim: usize,
        m_pool: usize,
        heads: usize,
    ) -> Result<Self> {
        let (h, w, c_s) = tap_shape;
        let n = h * w;
        let reduce = Tensor::from_vec(group_mean_matrix(n, m_pool), (m_pool, n), vs.device())?
            .to_dtype(vs.dtype())?;
        Ok(Self {
            pe: vs.get("pos_embed", &[n, c_s], Init::Normal { std: 0.02 })?,
            attn: Attention::new(&vs.pp("attn"), c_s, c_s, c_s, visual_dim, visual_dim, heads)?,
            reduce,
            ln: LayerNorm::new(&vs.pp("ln"), visual_dim)?,
            ffn: FeedForward::new(&vs.pp("ffn"), visual_dim, visual_dim * 4, visual_dim)?,
            tap_shape,
            tap_index,
        })
    }

    pub fn forward(&self, tap: &TokenGrid) -> Result<PooledFeatures> {
        Ok(self.forward_traced(tap)?.0)
    }

    /// Also returns the pooling attention weights `[B, heads, N, N]`.
    pub fn forward_traced(&self, tap: &TokenGrid) -> Result<(PooledFeatures, Tensor)> {
        if tap.shape() != self.tap_shape {
            bail!(
                Shape,
                "tap {} has shape {:?}, pooling registered for {:?}",
                self.tap_index,
                tap.shape(),
                self.tap_shape
            );
        }
        let f_m = tap.tokens.broadcast_add(&self.pe)?;
        let (attended, weights) = self.attn.forward(&f_m, &f_m, None)?;
        let pooled = self.reduce.broadcast_matmul(&attended)?;
        let out = (&pooled + self.ffn.forward(&self.ln.forward(&pooled)?)?)?;
        Ok((
            PooledFeatures {
                tokens: out,
                source_tap: self.tap_index,
            },
            weights,
        ))
    }
}

/// Attention weights recorded by one decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub self_weights: Tensor,
    pub cross_weights: Option<Tensor>,
    /// Output of the self-attention residual, before cross-attention.
    pub after_self: Tensor,
    /// Output of the cross-attention residual, before the FFN.
    pub after_cross: Tensor,
}

/// `x + SA(LN x)`, optionally `x + CA(LN x, pool)`, then `x + FFN(LN x)`.
#[derive(Debug, Clone)]
pub struct FeatureDecoder {
    ln1: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln3: LayerNorm,
    ffn: FeedForward,
    dim: usize,
}

impl FeatureDecoder {
    pub fn new(vs: &Scope, dim: usize, heads: usize, cross: bool) -> Result<Self> {
        let cross = if cross {
            Some((
                LayerNorm::new(&vs.pp("ln2"), dim)?,
                Attention::self_attn(&vs.pp("cross_attn"), dim, heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(&vs.pp("ln1"), dim)?,
            self_attn: Attention::self_attn(&vs.pp("self_attn"), dim, heads)?,
            cross,
            ln3: LayerNorm::new(&vs.pp("ln3"), dim)?,
            ffn: FeedForward::new(&vs.pp("ffn"), dim, dim * 4, dim)?,
            dim,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        pool: Option<&PooledFeatures>,
        key_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(x, pool, key_mask)?.0)
    }

    pub fn forward_traced(
        &self,
        x: &Tensor,
        pool: Option<&PooledFeatures>,
        key_mask: Option<&Tensor>,
    ) -> Result<(Tensor, DecoderTrace)> {
        let c = x.dims3()?.2;
        if c != self.dim {
            bail!(Shape, "decoder width {} got {c}-channel tokens", self.dim);
        }
        let h = self.ln1.forward(x)?;
        let (sa, self_weights) = self.self_attn.forward(&h, &h, key_mask)?;
        let after_self = (x + sa)?;
        let (after_cross, cross_weights) = match (&self.cross, pool) {
            (Some((ln, attn)), Some(pool)) => {
                let pc = pool.tokens.dims3()?.2;
                if pc != self.dim {
                    bail!(
                        Shape,
                        "pooled features have {pc} channels, decoder expects {}",
                        self.dim
                    );
                }
                let (ca, w) = attn.forward(&ln.forward(&after_self)?, &pool.tokens, None)?;
                ((&after_self + ca)?, Some(w))
            }
            (Some(_), None) => bail!(Input, "cross-attention decoder needs pooled features"),
            (None, _) => (after_self.clone(), None),
        };
        let out = (&after_cross + self.ffn.forward(&self.ln3.forward(&after_cross)?)?)?;
        Ok((
            out,
            DecoderTrace {
                self_weights,
                cross_weights,
                after_self,
                after_cross,
            },
        ))
    }
}

/// Conditioning produced at initialization and reused for every frame.
#[derive(Debug, Clone)]
pub enum Fused {
    Taps(UNetTaps),
    Text(TextFeatures),
}

impl Fused {
    pub fn detach(&self) -> Self {
        match self {
            Fused::Taps(t) => Fused::Taps(t.detach()),
            Fused::Text(t) => Fused::Text(t.detach()),
        }
    }

    pub fn cat(items: &[&Fused]) -> Result<Self> {
        match items.first() {
            Some(Fused::Taps(_)) => {
                let taps = items
                    .iter()
                    .map(|f| match f {
                        Fused::Taps(t) => Ok(t),
                        Fused::Text(_) => Err(GladError::Input("mixed conditioning kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Fused::Taps(UNetTaps::cat(&taps)?))
            }
            Some(Fused::Text(_)) => {
                let texts = items
                    .iter()
                    .map(|f| match f {
                        Fused::Text(t) => Ok(t),
                        Fused::Taps(_) => Err(GladError::Input("mixed conditioning kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Fused::Text(TextFeatures::cat(&texts)?))
            }
            None => bail!(Input, "nothing to concatenate"),
        }
    }
}

/// N decoders in cascade, in one of the three fusion variants.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    mode: FusionMode,
    pools: Vec<AttentionPool>,
    decoders: Vec<FeatureDecoder>,
    text_proj: Option<Linear>,
    dim: usize,
}

impl DecoderStack {
    /// `tap_shapes` are required for the pooled mode, in U-Net order.
    pub fn new(
        vs: &Scope,
        cfg: &FusionConfig,
        visual_dim: usize,
        text_dim: usize,
        taps: &[(usize, (usize, usize, usize))],
    ) -> Result<Self> {
        let n = cfg.n_decoders;
        let mut pools = Vec::new();
        let mut text_proj = None;
        match cfg.mode {
            FusionMode::Pooled => {
                if taps.len() != n {
                    bail!(Config, "{} taps for {n} decoders", taps.len());
                }
                for (i, (index, shape)) in taps.iter().enumerate() {
                    pools.push(AttentionPool::new(
                        &vs.pp(format!("pool.{i}")),
                        *index,
                        *shape,
                        visual_dim,
                        cfg.m_pool,
                        cfg.heads,
                    )?);
                }
            }
            FusionMode::Modulation | FusionMode::Concat => {
                text_proj = Some(Linear::new(&vs.pp("text_proj"), text_dim, visual_dim)?);
            }
        }
        let cross = cfg.mode == FusionMode::Pooled;
        let decoders = (0..n)
            .map(|i| {
                FeatureDecoder::new(&vs.pp(format!("decoder.{i}")), visual_dim, cfg.heads, cross)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: cfg.mode,
            pools,
            decoders,
            text_proj,
            dim: visual_dim,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoders.is_empty()
    }

    pub fn pools(&self) -> &[AttentionPool] {
        &self.pools
    }

    pub fn decoders(&self) -> &[FeatureDecoder] {
        &self.decoders
    }

    /// Decodes and returns the search segment as a grid.
    pub fn forward(
        &self,
        template: &TokenGrid,
        search: &TokenGrid,
        fused: &Fused,
    ) -> Result<TokenGrid> {
        Ok(self.forward_traced(template, search, fused)?.0)
    }

    pub fn forward_traced(
        &self,
        template: &TokenGrid,
        search: &TokenGrid,
        fused: &Fused,
    ) -> Result<(TokenGrid, Vec<DecoderTrace>)> {
        if template.channels() != self.dim || search.channels() != self.dim {
            bail!(
                Shape,
                "decoder width {} got template {} / search {} channels",
                self.dim,
                template.channels(),
                search.channels()
            );
        }
        let n_tp = template.len();
        let n_sr = search.len();
        let f_v = Tensor::cat(&[&template.tokens, &search.tokens], 1)?;
        let mut traces = Vec::with_capacity(self.decoders.len());
        let out = match (self.mode, fused) {
            (FusionMode::Pooled, Fused::Taps(taps)) => {
                if taps.len() != self.decoders.len() {
                    bail!(
                        Config,
                        "{} taps for {} decoders",
                        taps.len(),
                        self.decoders.len()
                    );
                }
                let mut x = f_v;
                for ((pool, dec), tap) in self.pools.iter().zip(&self.decoders).zip(&taps.taps) {
                    let p = pool.forward(tap)?;
                    let (y, trace) = dec.forward_traced(&x, Some(&p), None)?;
                    traces.push(trace);
                    x = y;
                }
                x
            }
            (FusionMode::Modulation, Fused::Text(text)) => {
                let proj = self.text_proj.as_ref().expect("text projection");
                let m = proj.forward(&text.pooled()?)?.unsqueeze(1)?;
                let mut x = (f_v.broadcast_mul(&m)? + &f_v)?;
                for dec in &self.decoders {
                    let (y, trace) = dec.forward_traced(&x, None, None)?;
                    traces.push(trace);
                    x = y;
                }
                x
            }
            (FusionMode::Concat, Fused::Text(text)) => {
                let proj = self.text_proj.as_ref().expect("text projection");
                let b = f_v.dims()[0];
                let t = proj.forward(&text.tokens)?;
                let (t, tmask) = if t.dims()[0] == b {
                    (t, text.mask.clone())
                } else {
                    let (_, l, c) = t.dims3()?;
                    (
                        t.broadcast_as((b, l, c))?.contiguous()?,
                        text.mask.broadcast_as((b, l))?.contiguous()?,
                    )
                };
                let mut x = Tensor::cat(&[&f_v, &t], 1)?;
                let ones = Tensor::ones((b, n_tp + n_sr), tmask.dtype(), tmask.device())?;
                let mask = Tensor::cat(&[&ones, &tmask], 1)?;
                for dec in &self.decoders {
                    let (y, trace) = dec.forward_traced(&x, None, Some(&mask))?;
                    traces.push(trace);
                    x = y;
                }
                x
            }
            (mode, _) => bail!(
                Config,
                "fusion mode {mode} does not match the provided conditioning"
            ),
        };
        let search_out = out.narrow(1, n_tp, n_sr)?;
        Ok((
            TokenGrid::new(search_out, search.grid_h, search.grid_w)?,
            traces,
        ))
    }
}
