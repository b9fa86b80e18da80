use candle_core::Tensor;

use crate::error::{bail, Result};

/// Discrete variance schedule. Timesteps are 1-based: `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            bail!(Config, "schedule needs at least 2 steps, got {steps}");
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            bail!(Config, "beta {b} outside (0, 1)");
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || *alpha_bars.last().unwrap() <= 0.0 {
            bail!(
                Config,
                "alpha_bar must be strictly decreasing inside (0, 1)"
            );
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linear betas 1e-4..0.02.
    pub fn standard(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.len() {
            bail!(Index, "timestep {t} outside 1..={}", self.len());
        }
        Ok(self.alpha_bars[t - 1])
    }

    /// `alpha_bar` extended with the clean endpoint `t = 0 -> 1`.
    fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        if x0.dims() != eps.dims() {
            bail!(
                Shape,
                "noise {:?} does not match latent {:?}",
                eps.dims(),
                x0.dims()
            );
        }
        Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Per-sample timesteps: `x0`/`eps` are `[B, ...]` and `ts` has length B.
    pub fn forward_noise_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let b = x0.dims()[0];
        if ts.len() != b {
            bail!(Shape, "{} timesteps for a batch of {b}", ts.len());
        }
        let rest = x0.rank() - 1;
        let mut shape = vec![b];
        shape.extend(std::iter::repeat_n(1, rest));
        let ab = ts
            .iter()
            .map(|t| self.alpha_bar(*t))
            .collect::<Result<Vec<_>>>()?;
        let sa: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
        let sb: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
        let dev = x0.device();
        let sa = Tensor::from_vec(sa, shape.as_slice(), dev)?.to_dtype(x0.dtype())?;
        let sb = Tensor::from_vec(sb, shape.as_slice(), dev)?.to_dtype(x0.dtype())?;
        Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
    }

    /// Clean-sample estimate implied by a noise prediction.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        Ok(((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
    }

    /// Deterministic (eta = 0) jump from `t` to an earlier `t_prev` (0 = clean).
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
    ) -> Result<Tensor> {
        if t_prev >= t {
            bail!(Index, "reverse step must go backwards: {t} -> {t_prev}");
        }
        let x0 = self.predict_x0(x_t, t, eps_hat)?;
        let ab_prev = self.alpha_bar_or_one(t_prev)?;
        Ok(((x0 * ab_prev.sqrt())? + (eps_hat * (1.0 - ab_prev).sqrt())?)?)
    }

    /// `steps` evenly strided timesteps from `t_start` toward 0, followed by 0.
    /// `strided(300, 1) = [300, 0]`, `strided(300, 3) = [300, 200, 100, 0]`.
    pub fn strided(&self, t_start: usize, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 {
            bail!(Config, "at least one denoising step is required");
        }
        self.alpha_bar(t_start)?;
        let steps = steps.min(t_start);
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| ((t_start as f64) * (steps - i) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.push(0);
        Ok(ts)
    }
}
