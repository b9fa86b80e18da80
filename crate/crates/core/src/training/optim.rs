//! AdamW with global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStats {
    pub norm_before: f64,
    pub norm_after: f64,
}

/// Global L2 norm of the gradients of `vars` (missing gradients count as zero).
pub fn global_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<ClipStats> {
    let norm_before = global_norm(grads, vars)?;
    if norm_before <= max_norm || norm_before == 0.0 {
        return Ok(ClipStats {
            norm_before,
            norm_after: norm_before,
        });
    }
    let scale = max_norm / norm_before;
    for v in vars {
        let t = v.as_tensor();
        if let Some(g) = grads.remove(t) {
            grads.insert(t, (g * scale)?);
        }
    }
    Ok(ClipStats {
        norm_before,
        norm_after: global_norm(grads, vars)?,
    })
}

pub struct ClippedAdamW {
    vars: Vec<Var>,
    inner: AdamW,
    max_norm: f64,
}

impl ClippedAdamW {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, max_norm: f64) -> Result<Self> {
        let inner = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr,
                weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            vars,
            inner,
            max_norm,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    pub fn lr(&self) -> f64 {
        self.inner.learning_rate()
    }

    /// Backprop, clip, update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<ClipStats> {
        let mut grads = loss.backward()?;
        let stats = clip_grad_norm(&mut grads, &self.vars, self.max_norm)?;
        self.inner.step(&grads)?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn setup() -> (Var, Var, Tensor) {
        let a = Var::new(&[1.0f64, -2.0, 3.0], &Device::Cpu).unwrap();
        let b = Var::new(&[0.5f64, 4.0], &Device::Cpu).unwrap();
        let loss = ((a.as_tensor().sqr().unwrap().sum_all().unwrap() * 10.0).unwrap()
            + b.as_tensor().sqr().unwrap().sum_all().unwrap())
        .unwrap();
        (a, b, loss)
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (a, b, loss) = setup();
        let mut grads = loss.backward().unwrap();
        let vars = vec![a, b];
        let s = clip_grad_norm(&mut grads, &vars, 0.1).unwrap();
        assert!(s.norm_before > 0.1);
        assert!(s.norm_after <= 0.1 + 1e-9, "{s:?}");
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (a, b, loss) = setup();
        let before: Vec<f64> = a.as_tensor().to_vec1().unwrap();
        let mut opt = ClippedAdamW::new(vec![a.clone(), b], 0.0, 1e-4, 0.1).unwrap();
        opt.backward_step(&loss).unwrap();
        let after: Vec<f64> = a.as_tensor().to_vec1().unwrap();
        assert_eq!(before, after);
    }
}
