//! Parameter storage and the small set of layers every network here is built from.
//!
//! Parameters are initialised from a ChaCha stream seeded by `(seed, name)`, so a
//! model's weights depend only on its seed and parameter names, never on
//! construction order or on a global RNG.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GladError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Glorot/Xavier uniform over `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Normal {
        std: f64,
    },
}

struct Param {
    var: Var,
    trainable: bool,
}

/// Shared, named parameter table. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            params: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| GladError::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn get_or_create(
        &self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Var> {
        let mut params = self.params.lock().unwrap();
        if let Some(p) = params.get(name) {
            if p.var.dims() != shape {
                return Err(GladError::Shape(format!(
                    "parameter {name}: stored {:?}, requested {:?}",
                    p.var.dims(),
                    shape
                )));
            }
            return Ok(p.var.clone());
        }
        let var = Var::from_tensor(&self.sample(name, shape, init)?)?;
        params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Trainable variables whose name starts with any of `prefixes`
    /// (all trainable variables when `prefixes` is empty), sorted by name.
    pub fn trainable_vars(&self, prefixes: &[&str]) -> Vec<Var> {
        self.params
            .lock()
            .unwrap()
            .iter()
            .filter(|(name, p)| {
                p.trainable
                    && (prefixes.is_empty() || prefixes.iter().any(|pre| name.starts_with(pre)))
            })
            .map(|(_, p)| p.var.clone())
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .lock()
            .unwrap()
            .iter()
            .map(|(n, p)| (n.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.params.lock().unwrap().get(name).map(|p| p.var.clone())
    }

    /// Overwrites every parameter from `tensors`; names must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let params = self.params.lock().unwrap();
        for (name, p) in params.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| GladError::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(GladError::Checkpoint(format!(
                    "parameter `{name}`: checkpoint {:?}, model {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !params.contains_key(*k)) {
            return Err(GladError::Checkpoint(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }

    /// Overwrites only the parameters named in `tensors`; each must exist.
    pub fn load_partial(&self, tensors: &BTreeMap<String, Tensor>) -> Result<usize> {
        let params = self.params.lock().unwrap();
        for (name, t) in tensors {
            let p = params
                .get(name)
                .ok_or_else(|| GladError::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(GladError::Checkpoint(format!(
                    "parameter `{name}`: checkpoint {:?}, model {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(tensors.len())
    }

    /// Sets to zero every parameter whose name ends with one of `suffixes`.
    pub fn zero_matching(&self, suffixes: &[&str]) -> Result<usize> {
        let params = self.params.lock().unwrap();
        let mut count = 0;
        for (name, p) in params.iter() {
            if suffixes.iter().any(|s| name.ends_with(s)) {
                p.var.set(&p.var.zeros_like()?)?;
                count += 1;
            }
        }
        Ok(count)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self
            .store
            .get_or_create(&self.full(name), shape, init, true)?
            .as_tensor()
            .clone())
    }

    /// Non-trainable state, e.g. batch-norm running statistics.
    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        self.store
            .get_or_create(&self.full(name), shape, Init::Const(value), false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vs: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = vs.get(
            "weight",
            &[out_dim, in_dim],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = vs.get("bias", &[out_dim], Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // one 2-D GEMM over all leading dims
        let dims = x.dims().to_vec();
        let (last, lead) = dims
            .split_last()
            .expect("linear input has at least one dim");
        let rows: usize = lead.iter().product();
        let y = x
            .reshape((rows, *last))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = lead.to_vec();
        out.push(self.out_dim());
        Ok(y.reshape(out)?)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vs.get("weight", &[dim], Init::Const(1.0))?,
            beta: vs.get("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Two-layer channel-wise MLP with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(vs: &Scope, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&vs.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&vs.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        // sigmoid form of GELU, x * sigmoid(1.702 x); the tanh form is several
        // times slower on CPU
        let h = (&h * candle_nn::ops::sigmoid(&(&h * 1.702)?)?)?;
        self.fc2.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        vs: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_bias(vs, in_ch, out_ch, kernel, stride, padding, 0.0)
    }

    pub fn with_bias(
        vs: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: f64,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        Ok(Self {
            weight: vs.get(
                "weight",
                &[out_ch, in_ch, kernel, kernel],
                Init::Xavier { fan_in, fan_out },
            )?,
            bias: vs.get("bias", &[out_ch], Init::Const(bias))?,
            stride,
            padding,
        })
    }

    /// All-zero weights and bias, so the layer starts as a constant zero map.
    pub fn zeros(
        vs: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: vs.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Const(0.0))?,
            bias: vs.get("bias", &[out_ch], Init::Const(0.0))?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (o, c, k, _) = self.weight.dims4()?;
        let (b, _, h, w) = x.dims4()?;
        if k == self.stride && self.padding == 0 && h % k == 0 && w % k == 0 {
            // non-overlapping windows: a single matmul, much cheaper to backprop
            let (gh, gw) = (h / k, w / k);
            let patches = x
                .reshape((b, c, gh, k, gw, k))?
                .permute((0, 2, 4, 1, 3, 5))?
                .reshape((b * gh * gw, c * k * k))?;
            let y = patches
                .matmul(&self.weight.reshape((o, c * k * k))?.t()?)?
                .broadcast_add(&self.bias.reshape((1, o))?)?;
            return Ok(y
                .reshape((b, gh, gw, o))?
                .permute((0, 3, 1, 2))?
                .contiguous()?);
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Batch normalisation over `[B, C, H, W]`; eval mode uses frozen running statistics.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: vs.get("weight", &[channels], Init::Const(1.0))?,
            beta: vs.get("bias", &[channels], Init::Const(0.0))?,
            running_mean: vs.buffer("running_mean", &[channels], 0.0)?,
            running_var: vs.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.gamma.dims()[0];
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let var = x
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.flatten_all()?.detach() * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (var.flatten_all()?.detach() * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Softmax over the last axis. `key_mask` is `[B, Nk]` with 1 for valid keys;
/// masked keys get exactly zero weight and fully masked rows are all zero.
pub fn masked_softmax(logits: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
    match key_mask {
        None => {
            let max = logits.max_keepdim(D::Minus1)?.detach();
            let e = logits.broadcast_sub(&max)?.exp()?;
            let s = e.sum_keepdim(D::Minus1)?;
            Ok(e.broadcast_div(&s)?)
        }
        Some(mask) => {
            let (b, nk) = mask.dims2()?;
            let rank = logits.rank();
            let mut shape = vec![b];
            shape.extend(std::iter::repeat_n(1, rank - 2));
            shape.push(nk);
            let mask = mask.to_dtype(logits.dtype())?.reshape(shape)?;
            let penalty = ((&mask - 1.0)? * 1e9)?;
            let shifted = logits.broadcast_add(&penalty)?;
            let max = shifted.max_keepdim(D::Minus1)?.detach();
            let e = shifted.broadcast_sub(&max)?.exp()?.broadcast_mul(&mask)?;
            let s = e.sum_keepdim(D::Minus1)?.maximum(1e-30)?;
            Ok(e.broadcast_div(&s)?)
        }
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value/output
/// projections. The value path may change the channel count.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    /// `q_in`/`kv_in` are the query and key/value input widths; `qk_dim` the
    /// attention width, `v_dim` the value width and `out_dim` the output width.
    pub fn new(
        vs: &Scope,
        q_in: usize,
        kv_in: usize,
        qk_dim: usize,
        v_dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !qk_dim.is_multiple_of(heads) || !v_dim.is_multiple_of(heads) {
            return Err(GladError::Config(format!(
                "attention widths {qk_dim}/{v_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&vs.pp("q"), q_in, qk_dim)?,
            k: Linear::new(&vs.pp("k"), kv_in, qk_dim)?,
            v: Linear::new(&vs.pp("v"), kv_in, v_dim)?,
            out: Linear::new(&vs.pp("out_proj"), v_dim, out_dim)?,
            heads,
        })
    }

    pub fn self_attn(vs: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Self::new(vs, dim, dim, dim, dim, dim, heads)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the projected output `[B, Nq, out]` and the weights `[B, heads, Nq, Nk]`.
    pub fn forward(
        &self,
        queries: &Tensor,
        keys_values: &Tensor,
        key_mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(keys_values)?)?;
        let v = self.split_heads(&self.v.forward(keys_values)?)?;
        let d = q.dims()[3] as f64;
        let logits = (q.matmul(&k.t()?)? / d.sqrt())?;
        let weights = masked_softmax(&logits, key_mask)?;
        let attended = weights.matmul(&v)?;
        let (b, h, n, c) = attended.dims4()?;
        let merged = attended.transpose(1, 2)?.reshape((b, n, h * c))?;
        Ok((self.out.forward(&merged)?, weights))
    }
}

/// Converts a `[B, C, H, W]` map into `[B, H*W, C]` tokens (row-major).
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(GladError::Shape(format!(
            "{n} tokens cannot form a {h}x{w} grid"
        )));
    }
    Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?.contiguous()?)
}
